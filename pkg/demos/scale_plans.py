"""Walk through how a target scale is split into stages.

    python demos/scale_plans.py
"""

from cascade_sr.scale_plan import ScaleDistribution, Strategy, plan_scales, sample_train_scale

import numpy as np


def main() -> None:
    for S in (3.0, 5.3, 8.0, 10.7):
        for strategy in Strategy:
            plan = plan_scales(S, 2.0, (16, 16), strategy)
            print(f"S = {S}, {strategy.value}: {plan.n_stages} stages, output {plan.output_resolution}")
            print(plan.format_table())
            print()

    # training draws: half the mass on the fixed scale, the rest uniform below it
    rng = np.random.default_rng(0)
    draws = np.array([sample_train_scale(ScaleDistribution(), rng) for _ in range(10_000)])
    print(f"fraction at s_fix: {np.mean(draws == 2.0):.3f}")
    print("histogram of the remainder draws:")
    counts, edges = np.histogram(draws[draws < 2.0], bins=5, range=(1.0, 2.0))
    for c, lo, hi in zip(counts, edges[:-1], edges[1:]):
        print(f"  [{lo:.1f}, {hi:.1f})  {'#' * (c // 50)}  {c}")


if __name__ == "__main__":
    main()
