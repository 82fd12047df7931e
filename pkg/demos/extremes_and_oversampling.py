"""Where the extreme values are, and how many extra windows they earn.

A three-component Gaussian mixture is fit to the training span.  Halfway
between neighbouring component means gives a low and a high threshold, and
every point beyond them is an extreme.  Each extreme adds up to 18 windows
whose horizon covers it, and the total is capped at 20% of the ordinary
windows.

    python demos/extremes_and_oversampling.py
"""

import numpy as np

from m2fmoe.data import extreme_thresholds, gmm_fit, oversample_starts, window_count
from m2fmoe.synthetic import generate

series = generate(seed=0)
values = series.values
split = int(0.75 * len(values))
t_in, t_p = 360, 72

gmm = gmm_fit(values[:split], m=3, seed=0)
order = np.argsort(gmm.means)
print("component   weight    mean     std")
for k in order:
    print(f"{k:>9}  {gmm.weights[k]:7.3f}  {gmm.means[k]:6.2f}  {np.sqrt(gmm.variances[k]):6.2f}")
print(f"EM ran {len(gmm.log_likelihood)} iterations, final log-likelihood {gmm.log_likelihood[-1]:.1f}\n")

lo, hi = extreme_thresholds(gmm)
train = values[:split]
print(f"thresholds: below {lo:.2f} or above {hi:.2f}")
print(f"extreme points in the training span: {int(np.sum((train < lo) | (train > hi)))}")
print(f"spike onsets in the training span: {int(np.sum(series.spikes < split))}\n")

for stride in (1, 4):
    ordinary = window_count(split, t_in, t_p, stride)
    starts, report = oversample_starts(values, (lo, hi), t_in, t_p, ordinary, limit=split)
    print(f"stride {stride}: {ordinary} ordinary windows, {report.windows_added} added"
          f" ({report.windows_added / ordinary:.1%}), cap applied: {report.cap_applied}")
