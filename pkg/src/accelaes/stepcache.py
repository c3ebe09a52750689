"""Step-level prediction cache with linear extrapolation.

After a warmup of always-full steps, a full model forward runs on every
delta-th sampler iteration and the steps in between are served by
extrapolating from the two most recent full forwards that are exactly
delta iterations apart:

    output(t) = near + lambda * (near - far),   lambda = (t - tau) / delta

where `near` is the prediction from the most recent full forward (at
iteration tau) and `far` the prediction from iteration tau - delta. The
schedule guarantees that pair exists before any skip is permitted: when
warmup is shorter than delta, the would-be skips right after warmup are
promoted to full steps until two delta-spaced full forwards have run.
With that pairing, lambda always lies in (0, 1) and any prediction
sequence affine in the iteration index is reproduced exactly at skipped
steps.

Iteration indices increase as sampling proceeds; `near`/`far` name the
endpoints by recency rather than by diffusion-time value, which runs in
the opposite direction.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import CacheMissError, ConfigError, ScheduleError

FULL = "FULL"
SKIP = "SKIP"

# Externally reported theoretical skip ratios for the standard schedule
# settings, keyed by (total_steps, warmup, delta). The enumeration below
# is authoritative here; these figures are echoed for comparison only and
# are not reproduced by it (see the schedule dump).
REFERENCE_SKIP_RATIOS: dict[tuple[int, int, int], float] = {
    (30, 5, 2): 0.467,
    (28, 5, 2): 0.464,
}


@dataclass(frozen=True)
class StepCacheConfig:
    delta: int = 2
    warmup: int = 5
    total_steps: int = 30

    def __post_init__(self):
        if self.delta < 1:
            raise ConfigError(f"delta must be >= 1, got {self.delta}")
        if self.warmup < 0:
            raise ConfigError(f"warmup must be >= 0, got {self.warmup}")
        if self.total_steps < 1:
            raise ConfigError(f"total_steps must be >= 1, got {self.total_steps}")
        if self.delta > 1 and self.warmup + 2 > self.total_steps:
            raise ConfigError(
                f"caching needs warmup + 2 <= total_steps; got warmup={self.warmup}, "
                f"total_steps={self.total_steps}"
            )


@dataclass(frozen=True)
class StepSchedule:
    """Per-step FULL/SKIP labels; the single source of truth for counts."""

    cfg: StepCacheConfig
    labels: tuple[str, ...]

    @property
    def full_count(self) -> int:
        return sum(1 for l in self.labels if l == FULL)

    @property
    def skip_count(self) -> int:
        return sum(1 for l in self.labels if l == SKIP)

    @property
    def theoretical_skip_ratio(self) -> float:
        return self.skip_count / len(self.labels)

    def to_json_dict(self) -> dict:
        key = (self.cfg.total_steps, self.cfg.warmup, self.cfg.delta)
        return {
            "T": self.cfg.total_steps,
            "T_w": self.cfg.warmup,
            "delta": self.cfg.delta,
            "labels": list(self.labels),
            "full_count": self.full_count,
            "skip_count": self.skip_count,
            "skip_ratio": self.theoretical_skip_ratio,
            "reference_skip_ratio": REFERENCE_SKIP_RATIOS.get(key),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), sort_keys=True)


def plan_schedule(cfg: StepCacheConfig) -> StepSchedule:
    """Enumerate the FULL/SKIP labels for one run.

    Warmup steps are all FULL. Afterwards every delta-th step is FULL and
    the rest SKIP, with two corrections: a would-be skip whose most recent
    full forward lacks a partner exactly delta steps earlier is promoted
    to FULL (endpoint bootstrap), and a trailing skip on the final step is
    forced FULL so every skip stays strictly between two full steps.
    """
    t_total, warm, delta = cfg.total_steps, cfg.warmup, cfg.delta
    head = min(warm, t_total)
    labels = [FULL] * head + [
        FULL if (s - warm) % delta == 0 else SKIP for s in range(head, t_total)
    ]
    fulls = {i for i, l in enumerate(labels) if l == FULL}
    last_full = -1
    for s in range(t_total):
        if labels[s] == FULL:
            last_full = s
            continue
        if (last_full - delta) not in fulls:
            labels[s] = FULL
            fulls.add(s)
            last_full = s
    if labels[-1] == SKIP:
        labels[-1] = FULL
    return StepSchedule(cfg=cfg, labels=tuple(labels))


@dataclass
class StepCacheState:
    """Endpoint predictions and bookkeeping for one sampling run."""

    e_near: np.ndarray | None = field(default=None, repr=False)
    e_far: np.ndarray | None = field(default=None, repr=False)
    tau: int = -1
    valid: bool = False
    fulls_recorded: int = 0
    skips_served: int = 0
    _history: dict[int, np.ndarray] = field(default_factory=dict, repr=False)

    def record_full(self, step: int, prediction: np.ndarray, delta: int) -> None:
        """Store a full-forward prediction and refresh the endpoint pair.

        The far endpoint is the prediction recorded exactly delta steps
        earlier, when available; the pair is valid only then.
        """
        self._history[step] = prediction
        self._history = {s: p for s, p in self._history.items() if s >= step - delta}
        self.tau = step
        self.e_near = prediction
        self.e_far = self._history.get(step - delta)
        self.valid = self.e_far is not None
        self.fulls_recorded += 1


def extrapolate(state: StepCacheState, t: int, cfg: StepCacheConfig) -> np.ndarray:
    """Linear extrapolation for a skipped step strictly inside the stride."""
    if not state.valid:
        raise CacheMissError("extrapolation requested before both endpoints exist")
    gap = t - state.tau
    if gap <= 0 or gap >= cfg.delta:
        raise ScheduleError(
            f"step {t} is not strictly between {state.tau} and {state.tau + cfg.delta}"
        )
    lam = gap / cfg.delta
    return state.e_near + lam * (state.e_near - state.e_far)


def step_or_skip(
    state: StepCacheState,
    schedule: StepSchedule,
    step: int,
    full_forward,
) -> np.ndarray:
    """Serve one step: run the model on FULL, extrapolate on SKIP."""
    if step < 0 or step >= len(schedule.labels):
        raise ScheduleError(f"step {step} outside schedule of {len(schedule.labels)} steps")
    if schedule.labels[step] == FULL:
        prediction = full_forward()
        state.record_full(step, prediction, schedule.cfg.delta)
        return prediction
    state.skips_served += 1
    return extrapolate(state, step, schedule.cfg)
