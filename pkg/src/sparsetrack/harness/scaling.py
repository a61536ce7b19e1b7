"""Grow a dense baseline along width or depth until it matches a parameter budget."""

from __future__ import annotations

from dataclasses import dataclass, replace

from ..trackformer import count_parameters

MAX_DEPTH = 512
MAX_WIDTH_STEPS = 256


@dataclass(frozen=True)
class ScaledConfig:
    config: object
    params: int
    target: int

    @property
    def overshoot_pct(self):
        return 100.0 * (self.params - self.target) / self.target


def scale_dense_to_match(base_cfg, target_params, axis):
    """Smallest depth, or width, whose exact parameter count reaches ``target_params``.

    Width grows in whole attention heads (the per-head size stays fixed) and
    the feed-forward size keeps its ratio to the width. Depth grows one block
    at a time. MoE placement is cleared: the result is always dense.
    """
    base = replace(base_cfg, moe_layer_indices=())
    base_params = count_parameters(base)
    if target_params < base_params:
        raise ValueError(f"target {target_params} is below the base count {base_params}")
    if axis == "depth":
        for depth in range(base.depth, MAX_DEPTH + 1):
            cfg = replace(base, depth=depth)
            n = count_parameters(cfg)
            if n >= target_params:
                return ScaledConfig(cfg, n, int(target_params))
    elif axis == "width":
        head_dim = base.model_dim // base.heads
        ff_ratio = base.ff_dim / base.model_dim
        for heads in range(base.heads, base.heads + MAX_WIDTH_STEPS + 1):
            width = heads * head_dim
            cfg = replace(base, model_dim=width, heads=heads, ff_dim=int(round(ff_ratio * width)))
            n = count_parameters(cfg)
            if n >= target_params:
                return ScaledConfig(cfg, n, int(target_params))
    else:
        raise ValueError(f"axis must be 'width' or 'depth', got {axis!r}")
    raise ValueError(f"target {target_params} unreachable along {axis}")
