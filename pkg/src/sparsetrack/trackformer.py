"""Any-point trajectory transformer with optional mixture-of-experts FFN blocks.

The token sequence is ``[instruction | image patches | track queries]``. Pre-norm
blocks run full self-attention over all of it; blocks listed in
``moe_layer_indices`` (1-based) swap their FFN for an :class:`MoELayer`. Track
token outputs decode to per-step displacements that are added to the query
point, so an all-zero head predicts stationary points.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .moe import MoELayer, load_balance_loss, moe_forward, router_z_loss
from .numerics import (
    AdamW,
    FeedForward,
    LayerNorm,
    Linear,
    Module,
    MultiHeadAttention,
    OptimizerConfig,
    ShapeError,
    Tensor,
    backward,
    concat,
    cosine_lr,
    dropout,
    gather_rows,
    mse,
    no_grad,
    parameter,
)
from .synthdata import TrajectoryQuery, ground_truth_tracks, sample_points_variance_filter

CHECKPOINT_FORMAT = 1


@dataclass(frozen=True)
class TrackformerConfig:
    image_size: int = 32
    patch_size: int = 8
    channels: int = 3
    depth: int = 8
    model_dim: int = 384
    heads: int = 6
    ff_dim: int = 1536
    dropout: float = 0.2
    moe_layer_indices: tuple = (1, 5, 8)
    num_experts: int = 4
    k: int = 1
    horizon: int = 16
    num_points: int = 32
    num_instructions: int = 11
    lambda_tra: float = 1.0
    lambda_lo_ba: float = 0.0
    lambda_z: float = 1e-4
    gating_noise: bool = False
    gating_noise_scale: float = 1.0
    slot_encoding: bool = True

    def __post_init__(self):
        object.__setattr__(self, "moe_layer_indices", tuple(sorted(int(i) for i in self.moe_layer_indices)))
        if self.depth < 1:
            raise ValueError("depth must be at least 1")
        if self.model_dim % self.heads:
            raise ValueError(f"model_dim {self.model_dim} is not divisible by {self.heads} heads")
        bad = [i for i in self.moe_layer_indices if not 1 <= i <= self.depth]
        if bad:
            raise ValueError(f"MoE layer positions {bad} outside [1, {self.depth}]")
        if len(set(self.moe_layer_indices)) != len(self.moe_layer_indices):
            raise ValueError("duplicate MoE layer positions")
        if self.image_size % self.patch_size:
            raise ValueError(f"image size {self.image_size} not divisible by patch {self.patch_size}")
        if not 1 <= self.k <= self.num_experts:
            raise ValueError(f"k={self.k} outside [1, {self.num_experts}]")
        if min(self.lambda_tra, self.lambda_lo_ba, self.lambda_z) < 0:
            raise ValueError("loss weights must be nonnegative")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")

    @property
    def num_patches(self):
        return (self.image_size // self.patch_size) ** 2

    @property
    def sequence_length(self):
        return 1 + self.num_patches + self.num_points

    def dense(self):
        """Same architecture with plain FFNs everywhere."""
        return replace(self, moe_layer_indices=())

    def to_dict(self):
        d = asdict(self)
        d["moe_layer_indices"] = list(self.moe_layer_indices)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def desk_config(**overrides):
    """Laptop-scale preset: 32x32 images, width 64, depth 8."""
    base = dict(image_size=32, patch_size=8, model_dim=64, heads=4, ff_dim=256, dropout=0.0)
    base.update(overrides)
    return TrackformerConfig(**base)


def full_scale_config(**overrides):
    """Full-size preset kept for parameter-count parity: width 384, depth 8, 128x128 images."""
    base = dict(image_size=128, patch_size=16, model_dim=384, heads=6, ff_dim=1536)
    base.update(overrides)
    return TrackformerConfig(**base)


def harder_mix_config(base=None):
    """Adds MoE blocks at positions 2 and 7 on top of the default placement."""
    base = base or desk_config()
    return replace(base, moe_layer_indices=tuple(sorted(set(base.moe_layer_indices) | {2, 7})))


# --- parameter accounting -------------------------------------------------------------


def _block_shared(d):
    return 2 * LayerNorm.count(d) + MultiHeadAttention.count(d)


def count_parameters(cfg):
    """Exact parameter count of :class:`TrackformerModel` built from ``cfg``."""
    d = cfg.model_dim
    patch_in = cfg.patch_size * cfg.patch_size * cfg.channels
    total = Linear.count(patch_in, d) + cfg.num_patches * d + cfg.num_instructions * d + Linear.count(2, d)
    if cfg.slot_encoding:
        total += cfg.num_points * d
    for i in range(1, cfg.depth + 1):
        total += _block_shared(d)
        if i in cfg.moe_layer_indices:
            total += MoELayer.count(d, cfg.ff_dim, cfg.num_experts)
        else:
            total += FeedForward.count(d, cfg.ff_dim)
    total += LayerNorm.count(d) + Linear.count(d, 2 * cfg.horizon)
    return total


def active_parameters_per_token(cfg):
    """Parameters a single token touches: shared weights, its k experts and every router."""
    inactive = (cfg.num_experts - cfg.k) * FeedForward.count(cfg.model_dim, cfg.ff_dim)
    return count_parameters(cfg) - len(cfg.moe_layer_indices) * inactive


# --- model ---------------------------------------------------------------------------------


class TransformerBlock(Module):
    def __init__(self, cfg, use_moe, rng):
        d = cfg.model_dim
        self.ln1 = LayerNorm(d)
        self.attn = MultiHeadAttention(d, cfg.heads, rng)
        self.ln2 = LayerNorm(d)
        if use_moe:
            self.ffn = MoELayer(d, cfg.ff_dim, cfg.num_experts, rng, cfg.k, cfg.gating_noise, cfg.gating_noise_scale)
        else:
            self.ffn = FeedForward(d, cfg.ff_dim, rng)
        self._moe = use_moe
        self._drop = cfg.dropout

    @property
    def is_moe(self):
        return self._moe

    def __call__(self, x, dropout_rng=None, noise_rng=None, training=False):
        x = x + dropout(self.attn(self.ln1(x)), self._drop, dropout_rng, training)
        b, s, d = x.shape
        h = self.ln2(x)
        routed = None
        if self._moe:
            routed = moe_forward(h.reshape(b * s, d), self.ffn, noise_rng, training)
            h = routed.output.reshape(b, s, d)
        else:
            h = self.ffn(h)
        return x + dropout(h, self._drop, dropout_rng, training), routed


def patchify(images, patch):
    """``(B, H, W, C)`` -> ``(B, n_patches, patch*patch*C)``, patches in row-major order."""
    images = images if isinstance(images, Tensor) else Tensor(images)
    b, h, w, c = images.shape
    if h % patch or w % patch:
        raise ShapeError(f"image {h}x{w} not divisible by patch size {patch}")
    nh, nw = h // patch, w // patch
    x = images.reshape(b, nh, patch, nw, patch, c).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, nh * nw, patch * patch * c)


class TrackformerModel(Module):
    def __init__(self, cfg, rng):
        d = cfg.model_dim
        self._cfg = cfg
        patch_in = cfg.patch_size * cfg.patch_size * cfg.channels
        self.patch_embed = Linear(patch_in, d, rng)
        self.pos_embed = parameter(rng.normal(0.0, 0.02, size=(cfg.num_patches, d)))
        self.instr_table = parameter(rng.normal(0.0, 0.02, size=(cfg.num_instructions, d)))
        self.point_proj = Linear(2, d, rng)
        if cfg.slot_encoding:
            self.slot_embed = parameter(rng.normal(0.0, 0.02, size=(cfg.num_points, d)))
        self.blocks = [TransformerBlock(cfg, i in cfg.moe_layer_indices, rng) for i in range(1, cfg.depth + 1)]
        self.final_ln = LayerNorm(d)
        self.head = Linear(d, 2 * cfg.horizon, rng)
        self.head.weight.data[:] = 0.0

    @property
    def config(self):
        return self._cfg

    def tokenize_observation(self, images):
        """Patch tokens with learned positions: ``(B, H, W, C)`` -> ``(B, n_patches, d)``."""
        return self.patch_embed(patchify(images, self._cfg.patch_size)) + self.pos_embed

    def embed_track_queries(self, points):
        """``(B, K, 2)`` normalized points -> ``(B, K, d)`` track tokens."""
        tokens = self.point_proj(points)
        if self._cfg.slot_encoding:
            if points.shape[-2] != self._cfg.num_points:
                raise ShapeError(f"slot encoding expects {self._cfg.num_points} points, got {points.shape[-2]}")
            tokens = tokens + self.slot_embed
        return tokens

    def embed_instructions(self, instr):
        instr = np.asarray(instr, dtype=np.int64).reshape(-1)
        if instr.size and (instr.min() < 0 or instr.max() >= self._cfg.num_instructions):
            raise IndexError(f"instruction id outside [0, {self._cfg.num_instructions})")
        return gather_rows(self.instr_table, instr).reshape(instr.size, 1, self._cfg.model_dim)

    def forward(self, images, points, instr, dropout_rng=None, noise_rng=None, training=None):
        """Returns ``(pred (B, H, K, 2), [(layer_position, MoEOutput), ...])``."""
        cfg = self._cfg
        training = self.training if training is None else training
        images = np.asarray(images, dtype=np.float64) if not isinstance(images, Tensor) else images
        points = np.asarray(points, dtype=np.float64)
        if images.ndim != 4 or images.shape[1:] != (cfg.image_size, cfg.image_size, cfg.channels):
            raise ShapeError(f"expected images (B, {cfg.image_size}, {cfg.image_size}, {cfg.channels}), got {images.shape}")
        if points.ndim != 3 or points.shape[0] != images.shape[0] or points.shape[2] != 2:
            raise ShapeError(f"expected points (B, K, 2), got {points.shape}")
        b, k = points.shape[:2]
        x = concat(
            [self.embed_instructions(instr), self.tokenize_observation(images), self.embed_track_queries(Tensor(points))],
            axis=1,
        )
        routed = []
        for pos, block in enumerate(self.blocks, start=1):
            x, r = block(x, dropout_rng, noise_rng, training)
            if r is not None:
                routed.append((pos, r))
        track = self.final_ln(x[:, 1 + cfg.num_patches :])
        offsets = self.head(track).reshape(b, k, cfg.horizon, 2).transpose(0, 2, 1, 3)
        return offsets + points[:, None], routed

    __call__ = forward


def build_model(cfg, seed_or_rng):
    rng = seed_or_rng if isinstance(seed_or_rng, np.random.Generator) else np.random.default_rng(seed_or_rng)
    return TrackformerModel(cfg, rng)


def predict(model, images, points, instr):
    """Inference: dropout and gating noise off, no graph recorded."""
    single = np.asarray(points).ndim == 2
    if single:
        images, points, instr = np.asarray(images)[None], np.asarray(points)[None], [instr]
    with no_grad():
        pred, _ = model.forward(images, points, instr, training=False)
    return pred.data[0] if single else pred.data


# --- objective -------------------------------------------------------------------------------


@dataclass
class LossParts:
    total: Tensor
    trajectory: float
    load_balance: float
    z: float
    stats: list = field(default_factory=list)  # (layer_position, RoutingStats)

    def as_dict(self):
        return {"total": float(self.total.data), "l_tra": self.trajectory, "l_lo_ba": self.load_balance, "l_z": self.z}


def total_loss(pred, target, routed, cfg):
    """Weighted sum of trajectory MSE and the router losses averaged over MoE layers."""
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {pred.shape} vs target {target.shape}")
    l_tra = mse(pred, target)
    total = l_tra * cfg.lambda_tra
    lb_val = z_val = 0.0
    if routed:
        lb = [load_balance_loss(r.stats) for _, r in routed]
        zs = [router_z_loss(r.logits) for _, r in routed]
        lb_mean = sum(lb[1:], lb[0]) * (1.0 / len(lb))
        z_mean = sum(zs[1:], zs[0]) * (1.0 / len(zs))
        if cfg.lambda_lo_ba:
            total = total + lb_mean * cfg.lambda_lo_ba
        if cfg.lambda_z:
            total = total + z_mean * cfg.lambda_z
        lb_val, z_val = float(lb_mean.data), float(z_mean.data)
    return LossParts(total, float(l_tra.data), lb_val, z_val, [(pos, r.stats) for pos, r in routed])


# --- data windows --------------------------------------------------------------------------------


@dataclass
class TrackDataset:
    images: np.ndarray  # (M, H, W, C)
    points: np.ndarray  # (M, K, 2)
    instr: np.ndarray  # (M,)
    domain: np.ndarray  # (M,)
    targets: np.ndarray  # (M, H, K, 2)

    def __len__(self):
        return len(self.instr)

    def subset(self, idx):
        return TrackDataset(self.images[idx], self.points[idx], self.instr[idx], self.domain[idx], self.targets[idx])

    @classmethod
    def concat(cls, parts):
        return cls(*(np.concatenate([getattr(p, f) for p in parts]) for f in ("images", "points", "instr", "domain", "targets")))


def episode_windows(episode, horizon, num_points, stride=1):
    """Every window ``t .. t+H`` of one episode with variance-filtered query points.

    Point sampling is seeded by ``(episode seed, t)`` so the windows are a pure
    function of the episode.
    """
    parts = []
    last = episode.num_frames - 1 - horizon
    for t in range(0, last + 1, stride):
        rng = np.random.default_rng([int(episode.seed), t])
        pts = sample_points_variance_filter(episode.frames[t : t + horizon + 1], num_points, rng)
        tracks = ground_truth_tracks(episode, TrajectoryQuery(pts, t), horizon)
        parts.append((episode.frames[t], pts, tracks))
    m = len(parts)
    return TrackDataset(
        np.stack([p[0] for p in parts]),
        np.stack([p[1] for p in parts]),
        np.full(m, episode.instruction_id, dtype=np.int64),
        np.full(m, episode.domain_id, dtype=np.int64),
        np.stack([p[2] for p in parts]),
    )


def windows_from_episodes(episodes, horizon, num_points, stride=1):
    return TrackDataset.concat([episode_windows(ep, horizon, num_points, stride) for ep in episodes])


def stationary_mse(dataset):
    """MSE of predicting that every point stays where it was queried."""
    return float(np.mean((dataset.targets - dataset.points[:, None]) ** 2))


# --- training ---------------------------------------------------------------------------------------


@dataclass
class TrainResult:
    model: TrackformerModel
    history: list
    final_loss: float


def train(
    dataset,
    cfg,
    opt_cfg=None,
    seed=0,
    batch_size=32,
    metrics_path=None,
    model=None,
    streams=None,
    log_every_epoch=True,
):
    """AdamW with linear warm-up and cosine decay over ``opt_cfg.epochs`` epochs.

    Randomness comes from named streams (``init``, ``data``, ``dropout``,
    ``noise``) derived from ``seed`` unless ``streams`` is supplied. One JSON
    line per epoch is appended to ``metrics_path``. A non-finite loss or gradient
    aborts the step and raises.
    """
    from .harness.seeding import RunStreams

    if len(dataset) == 0:
        raise ValueError("training needs a nonempty dataset")
    opt_cfg = opt_cfg or OptimizerConfig()
    streams = streams or RunStreams(seed)
    model = model or TrackformerModel(cfg, streams.get("init"))
    model.train()
    opt = AdamW(model.named_parameters(), opt_cfg.lr, opt_cfg.weight_decay, opt_cfg.betas, opt_cfg.eps, opt_cfg.grad_clip)
    data_rng, drop_rng, noise_rng = streams.get("data"), streams.get("dropout"), streams.get("noise")
    n = len(dataset)
    steps_per_epoch = math.ceil(n / batch_size)
    total_steps = steps_per_epoch * opt_cfg.epochs
    warmup = steps_per_epoch * opt_cfg.warmup_epochs
    history = []
    step = 0
    sink = open(metrics_path, "a") if metrics_path else None
    try:
        for epoch in range(opt_cfg.epochs):
            order = data_rng.permutation(n)
            sums = {"total": 0.0, "l_tra": 0.0, "l_lo_ba": 0.0, "l_z": 0.0}
            layer_stats = {}
            lr = opt_cfg.lr
            for start in range(0, n, batch_size):
                idx = order[start : start + batch_size]
                lr = cosine_lr(step, total_steps, warmup, opt_cfg.lr, opt_cfg.min_lr_ratio)
                pred, routed = model.forward(
                    dataset.images[idx], dataset.points[idx], dataset.instr[idx], drop_rng, noise_rng, training=True
                )
                parts = total_loss(pred, dataset.targets[idx], routed, cfg)
                opt.zero_grad()
                backward(parts.total)
                opt.step(lr)
                w = len(idx) / n
                for key, val in parts.as_dict().items():
                    sums[key] += w * val
                for pos, st in parts.stats:
                    layer_stats[pos] = st if pos not in layer_stats else layer_stats[pos].merge(st)
                step += 1
            record = {"epoch": epoch, "step": step, "lr": lr, **sums}
            record["layers"] = [
                {"layer_id": pos, "q": [float(v) for v in st.q], "p": [float(v) for v in st.p]}
                for pos, st in sorted(layer_stats.items())
            ]
            history.append(record)
            if sink and log_every_epoch:
                sink.write(json.dumps(record, sort_keys=True) + "\n")
                sink.flush()
    finally:
        if sink:
            sink.close()
    model.eval()
    return TrainResult(model, history, history[-1]["total"] if history else float("nan"))


def evaluate_mse(model, dataset, batch_size=64):
    """Overall and per-domain MSE plus per-domain, per-layer top-1 routing counts."""
    model.eval()
    sq = np.zeros(len(dataset))
    routing = {}
    for start in range(0, len(dataset), batch_size):
        sl = slice(start, start + batch_size)
        with no_grad():
            pred, routed = model.forward(dataset.images[sl], dataset.points[sl], dataset.instr[sl], training=False)
        sq[sl] = ((pred.data - dataset.targets[sl]) ** 2).reshape(pred.shape[0], -1).mean(axis=1)
        b = pred.shape[0]
        for pos, r in routed:
            choice = r.routing_logits.argmax(axis=1).reshape(b, -1)
            n_exp = r.routing_logits.shape[1]
            for dom in np.unique(dataset.domain[sl]):
                rows = choice[dataset.domain[sl] == dom].ravel()
                key = (int(dom), pos)
                routing[key] = routing.get(key, np.zeros(n_exp)) + np.bincount(rows, minlength=n_exp)
    per_domain = {int(d): float(sq[dataset.domain == d].mean()) for d in np.unique(dataset.domain)}
    return {"mse": float(sq.mean()), "per_domain": per_domain, "routing_counts": routing}


# --- checkpoints ----------------------------------------------------------------------------------


def save_checkpoint(path, model, kind="trackformer", extra=None):
    """npz with named parameter arrays, the config as JSON and a format version."""
    cfg = model.config
    meta = {"kind": kind, "format_version": CHECKPOINT_FORMAT, "config": cfg.to_dict(), "extra": extra or {}}
    arrays = {f"param/{name}": p.data for name, p in model.named_parameters()}
    arrays["meta"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def read_checkpoint(path):
    with np.load(path) as data:
        meta = json.loads(bytes(data["meta"]).decode())
        if meta.get("format_version") != CHECKPOINT_FORMAT:
            raise ValueError(f"unsupported checkpoint format {meta.get('format_version')}")
        state = {k[len("param/"):]: data[k].copy() for k in data.files if k.startswith("param/")}
    return meta, state


def load_checkpoint(path):
    meta, state = read_checkpoint(path)
    if meta["kind"] != "trackformer":
        raise ValueError(f"{path} holds a {meta['kind']} checkpoint")
    model = TrackformerModel(TrackformerConfig.from_dict(meta["config"]), np.random.default_rng(0))
    model.load_state_dict(state)
    model.eval()
    return model
