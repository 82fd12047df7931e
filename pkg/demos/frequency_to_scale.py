"""How band boundaries in frequency become boundaries in wavelet scale.

Three log-spaced bands are drawn across the range a 32-scale grid can
resolve on a 512-step signal.  A pure tone placed in each band should put
its strongest wavelet response inside the scales assigned to that band,
and the ratio of wavelet energy to Fourier energy should come out about
the same for every band.

    python demos/frequency_to_scale.py
"""

import numpy as np

from m2fmoe.bands import band_energy, masks_from_beta
from m2fmoe.spectral import ScaleGrid, WaveletSpec, cwt, rfft

n, experts = 512, 3
spec = WaveletSpec.cgau(7)
grid = ScaleGrid.for_length(spec, n, 32)
freqs = grid.frequencies(spec)  # Nyquist-normalized, one per scale

edges = np.exp(np.linspace(np.log(freqs.min()), 0.0, experts + 1))
masks = masks_from_beta(edges[1:-1], n // 2 + 1, grid, spec)

print(f"center frequency {spec.center_frequency:.4f} cycles/sample, gamma {spec.gamma:.4f}")
print(f"scales {grid.array()[0]:.2f} .. {grid.array()[-1]:.2f}\n")
print("band  frequency range      scales owned")
for e in range(experts):
    owned = grid.array()[masks.wavelet[e] > 0]
    print(f"{e:>4}  {edges[e]:.4f} - {edges[e + 1]:.4f}   {owned.min():7.2f} - {owned.max():7.2f}")

# tones in the middle of each band; the outer eighth of the signal is
# dropped on both sides because long wavelets hang off the ends there
cut = n // 8
t = np.arange(n)
print("\nband  tone freq  peak scale  in band  cwt/dft energy")
for e in range(experts):
    f = np.sqrt(edges[e] * edges[e + 1])
    x = np.cos(np.pi * f * t)
    w = cwt(x, grid, spec)[:, cut:-cut]
    peak = int(np.argmax((np.abs(w) ** 2).sum(axis=1)))
    ratio = (band_energy("wavelet", w, masks.wavelet[e], grid=grid)
             / (band_energy("fourier", rfft(x), masks.fourier[e], n=n) * (n - 2 * cut) / n))
    print(f"{e:>4}  {f:9.4f}  {grid.array()[peak]:10.2f}  {bool(masks.wavelet[e, peak])!s:>7}  {ratio:14.4f}")
