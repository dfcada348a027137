"""Help-giving around the question, hour by hour.

Builds the normalised help-rate curves for matched treated and control
windows and prints them as a coarse text chart.  Rates are divided by each
group's own pre-question average, so both series start near 1 and any gap
after the question marks a change in behaviour.

Run:  python3 demos/03_help_rate_curves.py
"""
import numpy as np

from reciprocity.pipeline import match_corpus
from reciprocity.report import adoption_curves, answered_share, help_rate_curves
from reciprocity.simulate import SimConfig, generate

cfg = SimConfig(n_users=8000, seed=31, beta_treated_active=0.25)
sample = match_corpus(generate(cfg)).sample()
ws, _ = sample.paired_windows()
treated = ws.take(np.arange(0, len(ws), 2))
control = ws.take(np.arange(1, len(ws), 2))

curves = {c.label: c for c in help_rate_curves({"treated": treated, "control": control},
                                               bin_hours=4.0)}
print("hours from window start   treated   control   (question at 48h)")
for k, lo in enumerate(curves["treated"].edges[:-1]):
    t, c = curves["treated"].normalized_rate[k], curves["control"].normalized_rate[k]
    print(f"{lo:>5.0f}-{lo + 4:<5.0f}{'':12}{t:8.3f}  {c:8.3f}  {'*' * round(max(t - c, 0) * 100)}")

share = answered_share(adoption_curves(treated, control, bin_hours=1.0))
print("\nshare of treated askers already answered, after the question:")
print("  ".join(f"{h}h {share[h - 1]:.0%}" for h in (1, 2, 6, 12, 24, 48)))
