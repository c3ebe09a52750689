"""Euler sampling loop orchestrating the acceleration stack.

Each iteration either runs the model (two passes under classifier-free
guidance) or serves the prediction from the step cache. The focus mask
is built once, from cross-attention captured on the conditional pass of
its construction step, which always runs densely; sparse computation
starts on the following step and spatially varying guidance as soon as
the mask exists. Conditional and unconditional passes keep separate FFN
caches since their hidden states differ.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .aesmask import MaskLifecycle
from .affinity import TokenAffinity
from .errors import ConfigError, LifecycleError
from .guidance import GuidanceConfig, apply_cfg
from .model import LatentTokens, TextCondition, ToyDit
from .sparse_block import DENSE, SPARSE, FfnCache, block_flop_terms, ATTENTION_TERMS
from .stepcache import (
    FULL,
    SKIP,
    StepCacheConfig,
    StepCacheState,
    StepSchedule,
    extrapolate,
    plan_schedule,
)


@dataclass(frozen=True)
class EngineConfig:
    """All acceleration knobs for one sampling run."""

    cache: StepCacheConfig = StepCacheConfig()
    guidance: GuidanceConfig = GuidanceConfig()
    mask_step: int = 5
    skip_ratio: float = 0.5
    layer_set: tuple[int, ...] | None = None
    use_sparse: bool = True
    use_cfg: bool = True


@dataclass
class SampleStats:
    """Accounting for one run: executed schedule, forwards, FLOPs, mask."""

    planned: StepSchedule
    executed_labels: tuple[str, ...] = ()
    forwards_run: int = 0
    full_steps: int = 0
    skip_steps: int = 0
    mask_step_promoted: bool = False
    dense_equivalent_flops: int = 0
    flops: dict[str, int] = field(
        default_factory=lambda: {"attention": 0, "ffn": 0, "other": 0, "extrapolation": 0}
    )
    mask_summary: dict | None = None
    affinity_triggered: bool | None = None

    @property
    def actual_flops(self) -> int:
        return sum(self.flops.values())

    @property
    def estimated_speedup(self) -> float:
        return self.dense_equivalent_flops / self.actual_flops


def _pass_flops(model: ToyDit, m_text: int, mode: str, n_focus: int) -> dict[str, int]:
    """FLOPs of one model pass, bucketed into attention / ffn / other."""
    spec = model.spec
    terms = block_flop_terms(
        spec.n_tokens, n_focus, spec.d, spec.d_h, mode,
        d_ff=spec.d_ff, d_c=spec.d_c, m_text=m_text,
    )
    attention = sum(v for k, v in terms.items() if k in ATTENTION_TERMS)
    ffn = sum(v for k, v in terms.items() if k not in ATTENTION_TERMS)
    head = 2 * spec.n_tokens * spec.d * spec.d  # output projection, always dense
    return {
        "attention": spec.depth * attention,
        "ffn": spec.depth * ffn,
        "other": head,
    }


def sample(
    model: ToyDit,
    init_noise: LatentTokens,
    cond: TextCondition,
    uncond: TextCondition,
    engine: EngineConfig,
    affinity: TokenAffinity | None = None,
) -> tuple[LatentTokens, SampleStats]:
    """Run the full sampling trajectory and return the final latent.

    Euler update with uniform dt over the unit interval:
    z <- z + dt * prediction. With every acceleration disabled the
    trajectory is the dense baseline; repeated runs are bit-identical.
    """
    cache_cfg = engine.cache
    t_total = cache_cfg.total_steps
    if engine.use_sparse and engine.mask_step >= t_total:
        raise LifecycleError(
            f"mask_step {engine.mask_step} must be < total steps {t_total}"
        )
    if engine.use_cfg and uncond is None:
        raise ConfigError("two-pass guidance requires an unconditional condition")

    planned = plan_schedule(cache_cfg)
    labels = list(planned.labels)
    stats = SampleStats(planned=planned)
    # Mask construction needs a dense forward with capture; if the plan
    # put a skip there, that one step runs full. The cache endpoints are
    # left untouched by this out-of-band forward so every later
    # extrapolation still spans exactly delta steps.
    out_of_band_step = None
    if engine.use_sparse and labels[engine.mask_step] == SKIP:
        labels[engine.mask_step] = FULL
        out_of_band_step = engine.mask_step
        stats.mask_step_promoted = True

    state = StepCacheState()
    lifecycle = (
        MaskLifecycle(engine.mask_step, engine.skip_ratio, engine.layer_set)
        if engine.use_sparse else None
    )
    caches_cond = [FfnCache() for _ in range(model.spec.depth)]
    caches_uncond = [FfnCache() for _ in range(model.spec.depth)]
    selected = (
        affinity.selected if (affinity is not None and affinity.triggered) else None
    )
    if affinity is not None:
        stats.affinity_triggered = affinity.triggered

    z = init_noise.values.copy()
    n, d = z.shape
    dt = 1.0 / t_total
    dense_eq_step = 0
    for m_text in ([cond.count, uncond.count] if engine.use_cfg else [cond.count]):
        dense_eq_step += sum(_pass_flops(model, m_text, DENSE, n).values())
    stats.dense_equivalent_flops = dense_eq_step * t_total

    for k in range(t_total):
        t = k / t_total
        if labels[k] == FULL:
            mask = lifecycle.current if lifecycle is not None else None
            capture = lifecycle is not None and k == engine.mask_step
            mode = SPARSE if (engine.use_sparse and mask is not None) else DENSE
            latent_k = LatentTokens(values=z, grid_h=init_noise.grid_h,
                                    grid_w=init_noise.grid_w)
            cond_pred, records = model.forward(
                latent_k, cond, t, mode=mode, mask=mask,
                caches=caches_cond, capture_attention=capture, step=k,
            )
            stats.forwards_run += 1
            n_focus = mask.focus_count if mask is not None else n
            for bucket, flops in _pass_flops(model, cond.count, mode, n_focus).items():
                stats.flops[bucket] += flops
            if capture:
                lifecycle.step(k, records=records, selected_tokens=selected)
            elif lifecycle is not None:
                lifecycle.step(k)
            if engine.use_cfg:
                uncond_pred, _ = model.forward(
                    latent_k, uncond, t, mode=mode, mask=mask,
                    caches=caches_uncond, capture_attention=False, step=k,
                )
                stats.forwards_run += 1
                for bucket, flops in _pass_flops(model, uncond.count, mode, n_focus).items():
                    stats.flops[bucket] += flops
                cfg_mask = lifecycle.current if lifecycle is not None else None
                prediction = apply_cfg(cond_pred, uncond_pred, cfg_mask, engine.guidance)
            else:
                prediction = cond_pred
            if k != out_of_band_step:
                state.record_full(k, prediction, cache_cfg.delta)
            stats.full_steps += 1
        else:
            prediction = extrapolate(state, k, cache_cfg)
            state.skips_served += 1
            stats.flops["extrapolation"] += 3 * n * d
            stats.skip_steps += 1
        z = z + dt * prediction

    stats.executed_labels = tuple(labels)
    if lifecycle is not None and lifecycle.current is not None:
        stats.mask_summary = lifecycle.current.to_json_dict()
    final = LatentTokens(values=z, grid_h=init_noise.grid_h, grid_w=init_noise.grid_w)
    return final, stats
