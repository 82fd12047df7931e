"""Train the default model on a synthetic flood-like series and compare it
with two baselines: repeating the last value, and least squares from the
input window to the horizon.

The series is hourly: a daily cycle, AR(1) noise, and 12 sudden spikes of
8-15 noise standard deviations that recede over a day or so.  The spike
neighborhoods are scored separately since that is where the baselines
struggle most.

    python demos/synthetic_benchmark.py            # 10 epochs, about 2 minutes
    python demos/synthetic_benchmark.py --epochs 50
"""

import argparse

from m2fmoe.benchmark import run_benchmark

parser = argparse.ArgumentParser()
parser.add_argument("--epochs", type=int, default=10)
parser.add_argument("--seed", type=int, default=0)
args = parser.parse_args()

result = run_benchmark(epochs=args.epochs, seed=args.seed)

print(f"trained {len(result.train.history)} epochs in {result.seconds:.0f}s, "
      f"best validation epoch {result.train.best_epoch}\n")
print(f"{'':12}{'test RMSE':>10}{'near spikes':>13}")
for name in ("model", "persistence", "linear"):
    print(f"{name:12}{result.rmse[name]:10.3f}{result.spike_rmse[name]:13.3f}")
print()
for base in ("persistence", "linear"):
    print(f"improvement over {base}: {result.improvement(base):.1%} overall, "
          f"{result.improvement(base, spikes=True):.1%} near spikes")
