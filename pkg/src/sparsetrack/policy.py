"""Trajectory-guided behaviour-cloning policy with mask-channel conditioning.

A predicted ``(H, K, 2)`` trajectory is rasterized into a single-channel mask
that rides along with each RGB frame as a fourth channel. The mask value at a
pixel comes from the horizon step that wrote it last (later steps, then higher
point indices, overwrite). In ``adaptive`` mode those values are learnable
scalars, one per horizon step; ``hand_drawn`` uses fixed grey/white halves;
``none`` leaves the channel at zero so the architecture is identical.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from . import kernels
from .numerics import (
    AdamW,
    LayerNorm,
    Linear,
    Module,
    OptimizerConfig,
    ShapeError,
    Tensor,
    backward,
    concat,
    cosine_lr,
    dropout,
    gather_rows,
    gelu,
    mse,
    no_grad,
    parameter,
)
from .synthdata import World, sample_points_grid
from .trackformer import TransformerBlock, patchify, predict as predict_tracks, read_checkpoint, save_checkpoint

MASK_MODES = ("none", "hand_drawn", "adaptive")
HAND_DRAWN_EARLY = 128.0 / 255.0
HAND_DRAWN_LATE = 1.0


@dataclass(frozen=True)
class PolicyConfig:
    image_size: int = 32
    patch_size: int = 8
    frame_stack: int = 10
    model_dim: int = 64
    depth: int = 2
    heads: int = 4
    ff_dim: int = 128
    head_hidden: int = 128
    dropout: float = 0.1
    mask_mode: str = "adaptive"
    horizon: int = 16
    num_points: int = 32
    action_dim: int = 3
    ground_truth_tracks: bool = False

    def __post_init__(self):
        if self.frame_stack < 1:
            raise ValueError("frame_stack must be at least 1")
        if self.mask_mode not in MASK_MODES:
            raise ValueError(f"mask_mode must be one of {MASK_MODES}")
        if self.image_size % self.patch_size:
            raise ValueError("image size not divisible by patch size")
        if self.model_dim % self.heads:
            raise ValueError("model_dim not divisible by heads")

    @property
    def num_patches(self):
        return (self.image_size // self.patch_size) ** 2

    @property
    def late_fusion_dim(self):
        return self.model_dim + self.horizon * self.num_points * 2

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def desk_policy_config(**overrides):
    base = dict(frame_stack=2, model_dim=48, heads=4, ff_dim=96, head_hidden=128, dropout=0.0)
    base.update(overrides)
    return PolicyConfig(**base)


# --- mask rendering -------------------------------------------------------------------------


def trajectory_pixels(traj, height, width):
    """Nearest-pixel ``(rows, cols)`` for every ``(h, k)`` write, flattened in write order."""
    traj = np.asarray(traj, dtype=np.float64)
    if traj.ndim != 3 or traj.shape[-1] != 2:
        raise ShapeError(f"trajectory must be (H, K, 2), got {traj.shape}")
    u = np.clip(traj[..., 0], 0.0, 1.0).reshape(-1)
    v = np.clip(traj[..., 1], 0.0, 1.0).reshape(-1)
    cols = np.minimum(np.floor(u * width), width - 1).astype(np.int64)
    rows = np.minimum(np.floor(v * height), height - 1).astype(np.int64)
    return rows, cols


def horizon_index_map(traj, height, width):
    """Per-pixel horizon step of the last write, ``-1`` where nothing was drawn."""
    traj = np.asarray(traj, dtype=np.float64)
    if traj.shape[0] == 0:
        return np.full((height, width), -1, dtype=np.int64)
    rows, cols = trajectory_pixels(traj, height, width)
    writer = kernels.last_writer_map(rows, cols, height, width)
    k = traj.shape[1]
    return np.where(writer >= 0, writer // k, -1)


def hand_drawn_values(horizon):
    early = math.ceil(horizon / 2)
    return np.where(np.arange(horizon) < early, HAND_DRAWN_EARLY, HAND_DRAWN_LATE)


def render_hand_drawn_mask(traj, height, width):
    """Fixed-value raster: first half of the horizon at 128/255, second half at 1."""
    traj = np.asarray(traj, dtype=np.float64)
    idx = horizon_index_map(traj, height, width)
    values = np.concatenate([[0.0], hand_drawn_values(traj.shape[0])])
    return values[idx + 1]


def render_adaptive_mask(traj, table, height, width):
    """Raster whose pixels carry ``table[h]`` of the horizon step that wrote them.

    ``table`` is a length-H tensor; gradient flows only into entries that
    survive the overwrite rule.
    """
    traj = np.asarray(traj, dtype=np.float64)
    table = table if isinstance(table, Tensor) else Tensor(table)
    if table.ndim != 1 or table.shape[0] != traj.shape[0]:
        raise ShapeError(f"mask table has {table.shape} entries for a horizon of {traj.shape[0]}")
    idx = horizon_index_map(traj, height, width)
    padded = concat([Tensor(np.zeros(1)), table], axis=0).reshape(-1, 1)
    return gather_rows(padded, (idx + 1).reshape(-1)).reshape(height, width)


def batch_index_maps(trajs, height, width):
    """``horizon_index_map`` for a batch ``(B, H, K, 2)`` in one kernel call."""
    trajs = np.asarray(trajs, dtype=np.float64)
    b, h, k, _ = trajs.shape
    if h == 0:
        return np.full((b, height, width), -1, dtype=np.int64)
    rows, cols = trajectory_pixels(trajs.reshape(b * h, k, 2), height, width)
    rows = rows + np.repeat(np.arange(b) * height, h * k)
    writer = kernels.last_writer_map(rows, cols, b * height, width).reshape(b, height, width)
    return np.where(writer >= 0, (writer % (h * k)) // k, -1)


# --- model ----------------------------------------------------------------------------------------


class PolicyModel(Module):
    def __init__(self, cfg, rng):
        d = cfg.model_dim
        self._cfg = cfg
        if cfg.mask_mode == "adaptive":
            self.mask_table = parameter((np.arange(cfg.horizon) + 1.0) / cfg.horizon)
        self.patch_embed = Linear(cfg.patch_size * cfg.patch_size * 4, d, rng)
        self.pos_embed = parameter(rng.normal(0.0, 0.02, size=(cfg.num_patches, d)))
        self.frame_embed = parameter(rng.normal(0.0, 0.02, size=(cfg.frame_stack, d)))
        self.track_embed = Linear(cfg.horizon * 2, d, rng)
        self.point_embed = parameter(rng.normal(0.0, 0.02, size=(cfg.num_points, d)))
        block_cfg = _BlockConfig(d, cfg.heads, cfg.ff_dim, cfg.dropout)
        self.blocks = [TransformerBlock(block_cfg, False, rng) for _ in range(cfg.depth)]
        self.fused_ln = LayerNorm(d)
        self.head1 = Linear(cfg.late_fusion_dim, cfg.head_hidden, rng)
        self.head2 = Linear(cfg.head_hidden, cfg.action_dim, rng)

    @property
    def config(self):
        return self._cfg

    def masks(self, trajs):
        """``(B, H_img, W_img)`` conditioning rasters for a batch of trajectories."""
        cfg = self._cfg
        b = trajs.shape[0]
        size = cfg.image_size
        if cfg.mask_mode == "none":
            return Tensor(np.zeros((b, size, size)))
        idx = batch_index_maps(trajs, size, size)
        if cfg.mask_mode == "hand_drawn":
            values = np.concatenate([[0.0], hand_drawn_values(cfg.horizon)])
            return Tensor(values[idx + 1])
        padded = concat([Tensor(np.zeros(1)), self.mask_table], axis=0).reshape(-1, 1)
        return gather_rows(padded, (idx + 1).reshape(-1)).reshape(b, size, size)

    def condition_and_encode(self, frames, masks):
        """Channel-concat each frame with the mask and patch-tokenize the 4-channel image.

        ``frames`` is ``(B, F, H, W, 3)``; returns ``(B, F * n_patches, d)``.
        """
        cfg = self._cfg
        frames = np.asarray(frames, dtype=np.float64)
        b, f, h, w, c = frames.shape
        if c != 3 or (h, w) != (cfg.image_size, cfg.image_size) or f != cfg.frame_stack:
            raise ShapeError(f"frames {frames.shape} do not match the policy config")
        if masks.shape != (b, h, w):
            raise ShapeError(f"mask {masks.shape} does not match frames {(b, h, w)}")
        stacked = masks.reshape(b, 1, h, w, 1) + Tensor(np.zeros((1, f, 1, 1, 1)))
        four = concat([Tensor(frames), stacked], axis=-1)
        tokens = self.patch_embed(patchify(four.reshape(b * f, h, w, 4), cfg.patch_size))
        n = cfg.num_patches
        tokens = tokens.reshape(b, f, n, -1) + self.pos_embed + self.frame_embed.reshape(f, 1, -1)
        return tokens.reshape(b, f * n, cfg.model_dim)

    def forward(self, frames, trajs, dropout_rng=None, training=None):
        """Actions ``(B, A)`` from stacked frames ``(B, F, H, W, 3)`` and trajectories ``(B, H, K, 2)``."""
        cfg = self._cfg
        training = self.training if training is None else training
        trajs = np.asarray(trajs, dtype=np.float64)
        b = trajs.shape[0]
        if trajs.shape[1:] != (cfg.horizon, cfg.num_points, 2):
            raise ShapeError(f"trajectories {trajs.shape} do not match (B, {cfg.horizon}, {cfg.num_points}, 2)")
        image_tokens = self.condition_and_encode(frames, self.masks(trajs))
        per_point = trajs.transpose(0, 2, 1, 3).reshape(b, cfg.num_points, cfg.horizon * 2)
        track_tokens = self.track_embed(per_point) + self.point_embed
        x = concat([image_tokens, track_tokens], axis=1)
        for block in self.blocks:
            x, _ = block(x, dropout_rng, None, training)
        pooled = self.fused_ln(x.mean(axis=1))
        late = concat([pooled, Tensor(trajs.reshape(b, -1))], axis=1)
        hidden = dropout(gelu(self.head1(late)), cfg.dropout, dropout_rng, training)
        return self.head2(hidden)

    __call__ = forward


@dataclass(frozen=True)
class _BlockConfig:
    model_dim: int
    heads: int
    ff_dim: int
    dropout: float
    num_experts: int = 1
    k: int = 1
    gating_noise: bool = False
    gating_noise_scale: float = 1.0


def policy_predict(model, frames, trajs):
    with no_grad():
        return model.forward(frames, trajs, training=False).data


# --- demonstrations ------------------------------------------------------------------------------


def stack_frames(frames, t, frame_stack):
    """Frames ``t-F+1 .. t``, repeating frame 0 before the episode starts."""
    idx = np.clip(np.arange(t - frame_stack + 1, t + 1), 0, None)
    return frames[idx]


@dataclass
class DemoSet:
    frames: np.ndarray  # (M, F, H, W, 3)
    trajs: np.ndarray  # (M, H, K, 2)
    actions: np.ndarray  # (M, A)

    def __len__(self):
        return len(self.actions)


def build_demo_set(episodes, traj_model, cfg, batch_size=64):
    """Per-step samples with the frozen trajectory model's grid-query predictions.

    With ``cfg.ground_truth_tracks`` the analytic tracks replace the predictions.
    """
    from .synthdata import TrajectoryQuery, ground_truth_tracks

    grid = sample_points_grid(cfg.num_points, cfg.image_size, cfg.image_size)
    frames, trajs, actions, query_frames, instr = [], [], [], [], []
    for ep in episodes:
        if not ep.has_actions:
            raise ValueError("behaviour cloning needs action-labelled episodes")
        for t in range(ep.num_frames - 1):
            frames.append(stack_frames(ep.frames, t, cfg.frame_stack))
            actions.append(ep.actions[t])
            query_frames.append(ep.frames[t])
            instr.append(ep.instruction_id)
            if cfg.ground_truth_tracks:
                h = min(cfg.horizon, ep.num_frames - 1 - t)
                tr = ground_truth_tracks(ep, TrajectoryQuery(grid, t), h)
                pad = np.broadcast_to(tr[-1:] if h else grid[None], (cfg.horizon - h,) + grid.shape)
                trajs.append(np.concatenate([tr, pad]))
    if not cfg.ground_truth_tracks:
        q = np.stack(query_frames)
        pts = np.broadcast_to(grid, (len(q),) + grid.shape)
        ins = np.asarray(instr)
        trajs = [predict_tracks(traj_model, q[i : i + batch_size], pts[i : i + batch_size], ins[i : i + batch_size])
                 for i in range(0, len(q), batch_size)]
        trajs = np.concatenate(trajs)
    return DemoSet(np.stack(frames), np.asarray(trajs), np.stack(actions))


# --- training ------------------------------------------------------------------------------------


@dataclass
class PolicyTrainResult:
    model: PolicyModel
    history: list
    final_loss: float


def train_policy(demos, cfg, opt_cfg=None, seed=0, batch_size=32, metrics_path=None, streams=None):
    """Behaviour cloning (action MSE) with AdamW and warm-up + cosine decay.

    ``demos`` is a :class:`DemoSet` whose trajectories were produced by a frozen
    trajectory model, so no gradient can reach that model.
    """
    from .harness.seeding import RunStreams

    if len(demos) == 0:
        raise ValueError("no demonstrations")
    opt_cfg = opt_cfg or OptimizerConfig(lr=5e-4, weight_decay=1e-4, warmup_epochs=5, epochs=120)
    streams = streams or RunStreams(seed)
    model = PolicyModel(cfg, streams.get("init"))
    model.train()
    opt = AdamW(model.named_parameters(), opt_cfg.lr, opt_cfg.weight_decay, opt_cfg.betas, opt_cfg.eps, opt_cfg.grad_clip)
    data_rng, drop_rng = streams.get("data"), streams.get("dropout")
    n = len(demos)
    steps_per_epoch = math.ceil(n / batch_size)
    total = steps_per_epoch * opt_cfg.epochs
    warmup = steps_per_epoch * opt_cfg.warmup_epochs
    history, step = [], 0
    sink = open(metrics_path, "a") if metrics_path else None
    try:
        for epoch in range(opt_cfg.epochs):
            order = data_rng.permutation(n)
            tot, lr = 0.0, opt_cfg.lr
            for start in range(0, n, batch_size):
                idx = order[start : start + batch_size]
                lr = cosine_lr(step, total, warmup, opt_cfg.lr, opt_cfg.min_lr_ratio)
                pred = model.forward(demos.frames[idx], demos.trajs[idx], drop_rng, training=True)
                loss = mse(pred, demos.actions[idx])
                opt.zero_grad()
                backward(loss)
                opt.step(lr)
                tot += float(loss.data) * len(idx) / n
                step += 1
            record = {"epoch": epoch, "step": step, "lr": lr, "bc_mse": tot}
            if cfg.mask_mode == "adaptive":
                record["mask_table"] = [float(v) for v in model.mask_table.data]
            history.append(record)
            if sink:
                sink.write(json.dumps(record, sort_keys=True) + "\n")
                sink.flush()
    finally:
        if sink:
            sink.close()
    model.eval()
    return PolicyTrainResult(model, history, history[-1]["bc_mse"])


# --- closed loop -----------------------------------------------------------------------------------


def rollout_batch(policy, traj_model, worlds, max_steps=60):
    """Run several worlds in lock-step; each stops at success or ``max_steps``.

    Each step predicts trajectories for the grid queries on the current frame,
    then an action, then advances the world. Returns one record per world.
    """
    cfg = policy.config
    grid = sample_points_grid(cfg.num_points, cfg.image_size, cfg.image_size)
    histories = [[w.reset()] for w in worlds]
    done = [False] * len(worlds)
    success = [False] * len(worlds)
    steps = [0] * len(worlds)
    for _ in range(max_steps):
        live = [i for i, d in enumerate(done) if not d]
        if not live:
            break
        frames = np.stack([stack_frames(np.asarray(histories[i]), len(histories[i]) - 1, cfg.frame_stack) for i in live])
        current = frames[:, -1]
        instr = np.array([worlds[i].spec.instruction_id for i in live])
        trajs = predict_tracks(traj_model, current, np.broadcast_to(grid, (len(live),) + grid.shape), instr)
        actions = policy_predict(policy, frames, trajs)
        for j, i in enumerate(live):
            histories[i].append(worlds[i].step(actions[j]))
            steps[i] += 1
            if worlds[i].success():
                success[i] = done[i] = True
    return [
        {"task_id": int(w.spec.domain_id), "seed": int(w.seed), "steps": int(steps[i]), "success": bool(success[i]),
         "final_distance": float(w.distance())}
        for i, w in enumerate(worlds)
    ]


def rollout(policy, traj_model, world, max_steps=60):
    """Single-world closed loop; ``max_steps == 0`` is an immediate failure."""
    if max_steps <= 0:
        world.reset()
        return False, {"task_id": int(world.spec.domain_id), "seed": int(world.seed), "steps": 0, "success": False,
                       "final_distance": world.distance()}
    rec = rollout_batch(policy, traj_model, [world], max_steps)[0]
    return rec["success"], rec


def rollout_records_json(records):
    return "".join(json.dumps(r, sort_keys=True) + "\n" for r in records)


def evaluate_policy(policy, traj_model, specs, seeds, max_steps=60):
    worlds = [World(spec, s) for spec in specs for s in seeds]
    records = rollout_batch(policy, traj_model, worlds, max_steps)
    return float(np.mean([r["success"] for r in records])), records


# --- checkpoints --------------------------------------------------------------------------------------


def save_policy(path, model):
    save_checkpoint(path, model, kind="policy")


def load_policy(path):
    meta, state = read_checkpoint(path)
    if meta["kind"] != "policy":
        raise ValueError(f"{path} holds a {meta['kind']} checkpoint")
    model = PolicyModel(PolicyConfig.from_dict(meta["config"]), np.random.default_rng(0))
    model.load_state_dict(state)
    model.eval()
    return model
