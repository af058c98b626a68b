"""Convenience runner for the synthetic multicalibration benchmark."""
from __future__ import annotations

from pathlib import Path

from mcgrad_lab.bench import default_suite, run_benchmark
from mcgrad_lab.config import AblationGrid, BenchConfig


def run_synthetic_benchmark(n: int = 20000, seeds: int = 5, ablation: bool = True, out_dir: str = "reports"):
    """Run the comparison grid (and ablations) on the synthetic suite and write CSVs to reports/."""
    Path(out_dir).mkdir(exist_ok=True)
    config = BenchConfig(seeds=list(range(seeds)))
    frames = run_benchmark(out_dir, config, default_suite(n), AblationGrid() if ablation else None)

    ranks = frames["ranks"]
    print("Benchmark complete")
    print(f"Datasets: {', '.join(name for name, _ in default_suite(n))} | n={n} | seeds={seeds}")
    for row in ranks.itertuples(index=False):
        print(f"{row.method:>10s}  avg MCE: {row.avg:.3f}  avg rank: {row.avg_rank:.2f}")
    if "ablation" in frames:
        ablation_frame = frames["ablation"]
        mce = ablation_frame[ablation_frame["metric"] == "mce"].groupby("variant")["improvement"].mean()
        for variant, value in mce.items():
            print(f"Ablation {variant}: MCE improvement vs full {value:+.2%}")
    print(f"Reports written to {Path(out_dir).resolve()}")
    return frames


if __name__ == "__main__":
    run_synthetic_benchmark()
