"""Decomposition of a target magnification into cascade stages.

A target scale ``S`` is split into ``n = ceil(log S / log s_fix)`` stages.
The default ``remainder_last`` strategy runs ``n - 1`` stages at ``s_fix``
followed by one remainder stage ``S / s_fix**(n-1)``, which lies in
``(1, s_fix]``.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

DEFAULT_FIXED_SCALE = 2.0

# guards ceil() against log-ratio round-off for exact powers (log 8 / log 2 = 3.0000000000000004)
_LOG_EPS = 1e-9


class Strategy(str, enum.Enum):
    REMAINDER_LAST = "remainder_last"
    REMAINDER_FIRST = "remainder_first"
    UNIFORM = "uniform"

    @classmethod
    def parse(cls, value: "Strategy | str") -> "Strategy":
        if isinstance(value, cls):
            return value
        aliases = {"rl": cls.REMAINDER_LAST, "rf": cls.REMAINDER_FIRST, "us": cls.UNIFORM}
        key = str(value).lower().replace("-", "_")
        if key in aliases:
            return aliases[key]
        return cls(key)


@dataclass(frozen=True)
class ScalePlan:
    target_scale: float
    fixed_scale: float
    n_stages: int
    stage_scales: tuple[float, ...]
    input_resolution: tuple[int, int]
    stage_resolutions: tuple[tuple[int, int], ...]
    strategy: Strategy = Strategy.REMAINDER_LAST

    @property
    def output_resolution(self) -> tuple[int, int]:
        return self.stage_resolutions[-1]

    @property
    def effective_scales(self) -> tuple[tuple[float, float], ...]:
        """Per-stage (height, width) ratios actually realised by the integer grids."""
        out = []
        prev = self.input_resolution
        for res in self.stage_resolutions:
            out.append((res[0] / prev[0], res[1] / prev[1]))
            prev = res
        return tuple(out)

    def stage_input_resolution(self, i: int) -> tuple[int, int]:
        """Input grid of stage ``i`` (0-based)."""
        return self.input_resolution if i == 0 else self.stage_resolutions[i - 1]

    def table(self) -> list[dict]:
        rows = []
        for i, (s, res, eff) in enumerate(zip(self.stage_scales, self.stage_resolutions, self.effective_scales)):
            rows.append({
                "stage": i + 1,
                "scale": s,
                "effective_scale_h": eff[0],
                "effective_scale_w": eff[1],
                "height": res[0],
                "width": res[1],
            })
        return rows

    def format_table(self) -> str:
        head = f"{'stage':>5}  {'scale':>10}  {'eff_h':>8}  {'eff_w':>8}  {'resolution':>12}"
        lines = [head, "-" * len(head)]
        h0, w0 = self.input_resolution
        lines.append(f"{0:>5}  {'':>10}  {'':>8}  {'':>8}  {f'{h0}x{w0}':>12}")
        for r in self.table():
            res = f"{r['height']}x{r['width']}"
            lines.append(
                f"{r['stage']:>5}  {r['scale']:>10.6f}  {r['effective_scale_h']:>8.4f}  "
                f"{r['effective_scale_w']:>8.4f}  {res:>12}"
            )
        return "\n".join(lines)


def n_stages_for(target_scale: float, fixed_scale: float) -> int:
    """``ceil(log S / log s_fix)``, at least one stage."""
    ratio = math.log(target_scale) / math.log(fixed_scale)
    return max(1, math.ceil(ratio - _LOG_EPS))


def plan_scales(
    target_scale: float,
    fixed_scale: float = DEFAULT_FIXED_SCALE,
    input_res: tuple[int, int] = (1, 1),
    strategy: Strategy | str = Strategy.REMAINDER_LAST,
) -> ScalePlan:
    """Build the stage sequence reaching ``round(h*S) x round(w*S)`` from ``input_res``.

    Intermediate grids are the running real-valued resolution rounded to the
    nearest integer; the last grid is pinned to ``round(h*S), round(w*S)`` so
    the rounding error is absorbed by the final stage.
    """
    S = float(target_scale)
    s_fix = float(fixed_scale)
    if not math.isfinite(S) or S <= 1.0:
        raise ValueError(f"target scale must be > 1 (no upsampling otherwise), got {target_scale}")
    if not math.isfinite(s_fix) or s_fix <= 1.0:
        raise ValueError(f"fixed scale must be > 1, got {fixed_scale}")
    h, w = (int(v) for v in input_res)
    if h < 1 or w < 1:
        raise ValueError(f"input resolution must be positive, got {input_res}")
    strategy = Strategy.parse(strategy)

    n = n_stages_for(S, s_fix)
    if strategy is Strategy.UNIFORM:
        scales = [S ** (1.0 / n)] * n
    else:
        remainder = S / s_fix ** (n - 1)
        scales = [s_fix] * (n - 1)
        if strategy is Strategy.REMAINDER_LAST:
            scales = scales + [remainder]
        else:
            scales = [remainder] + scales

    resolutions = []
    running = 1.0
    for s in scales[:-1]:
        running *= s
        resolutions.append((max(1, round(h * running)), max(1, round(w * running))))
    resolutions.append((round(h * S), round(w * S)))

    return ScalePlan(
        target_scale=S,
        fixed_scale=s_fix,
        n_stages=n,
        stage_scales=tuple(scales),
        input_resolution=(h, w),
        stage_resolutions=tuple(resolutions),
        strategy=strategy,
    )


@dataclass(frozen=True)
class ScaleDistribution:
    """Training-time per-stage scale law: mass ``p_fixed`` on ``fixed_scale``,
    the rest uniform on ``[1, fixed_scale)``."""

    p_fixed: float = 0.5
    fixed_scale: float = DEFAULT_FIXED_SCALE

    def __post_init__(self):
        if not 0.0 <= self.p_fixed <= 1.0:
            raise ValueError(f"p_fixed must lie in [0, 1], got {self.p_fixed}")
        if not self.fixed_scale > 1.0:
            raise ValueError(f"fixed_scale must be > 1, got {self.fixed_scale}")


def sample_train_scale(dist: ScaleDistribution, rng: np.random.Generator) -> float:
    if rng.random() < dist.p_fixed:
        return float(dist.fixed_scale)
    return float(rng.uniform(1.0, dist.fixed_scale))
