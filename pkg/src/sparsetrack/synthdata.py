"""Synthetic multi-domain 2D world: scenes, dynamics, analytic tracks and datasets.

Coordinates are continuous pixel units ``(x, y)`` with pixel ``(row, col)``
covering ``[col, col+1) x [row, row+1)``. Query points and tracks use the
normalized form ``(u, v) = (x / W, y / H)``.

Every object position lies on a 1/256-pixel grid, so per-step displacements,
track composition and action replay are exact in floating point.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import kernels

DYNAMICS_FAMILIES = ("linear_push", "arc_transport", "two_phase_pick_place")
POSITION_GRID = 256.0
BASE_SPEED = 1.0  # pixels per step at speed_scale 1
TARGET_RADIUS = 4.5
SUPERSAMPLE = 4
VARIANCE_FLOOR = 1e-6

EPISODE_MAGIC = b"STEPISOD"
EPISODE_VERSION = 1
_HEADER = struct.Struct("<8sIIIIiiIQd")

# background rgb, target rgb, distractor rgbs
PALETTES = (
    ((0.10, 0.10, 0.12), (0.95, 0.30, 0.20), ((0.30, 0.60, 0.90), (0.40, 0.80, 0.40))),
    ((0.85, 0.82, 0.75), (0.15, 0.25, 0.70), ((0.70, 0.40, 0.20), (0.30, 0.30, 0.30))),
    ((0.20, 0.30, 0.20), (0.95, 0.90, 0.20), ((0.80, 0.20, 0.60), (0.60, 0.60, 0.90))),
    ((0.30, 0.15, 0.30), (0.30, 0.95, 0.80), ((0.90, 0.60, 0.10), (0.50, 0.20, 0.10))),
    ((0.55, 0.55, 0.60), (0.90, 0.10, 0.50), ((0.10, 0.40, 0.20), (0.95, 0.95, 0.95))),
)


def quantize(x):
    """Snap positions onto the exact dyadic grid."""
    return np.round(np.asarray(x, dtype=np.float64) * POSITION_GRID) / POSITION_GRID


@dataclass(frozen=True)
class DomainSpec:
    """One task/domain of the synthetic world.

    ``goal`` is the end pose for push and pick-place families, and ``(cx, cy,
    goal_angle)`` orbit parameters are used by arc transport. ``in_domain``
    tasks carry action labels.
    """

    domain_id: int
    dynamics_family: str
    speed_scale: float = 1.0
    background_palette: int = 0
    distractor_count: int = 2
    goal: tuple = (16.0, 16.0)
    arc_center: tuple = (16.0, 16.0)
    arc_goal_angle: float = 0.0
    in_domain: bool = False
    image_size: int = 32
    num_frames: int = 24
    target_color: tuple | None = None

    def __post_init__(self):
        if self.dynamics_family not in DYNAMICS_FAMILIES:
            raise ValueError(f"unknown dynamics family {self.dynamics_family!r}")
        if not self.speed_scale > 0:
            raise ValueError("speed_scale must be positive")
        if self.distractor_count < 0:
            raise ValueError("distractor_count must be nonnegative")

    @property
    def instruction_id(self):
        return self.domain_id

    @property
    def speed(self):
        return BASE_SPEED * self.speed_scale

    def palette(self):
        bg, tgt, distract = PALETTES[self.background_palette % len(PALETTES)]
        return bg, (self.target_color or tgt), distract


@dataclass
class Episode:
    frames: np.ndarray  # (T, H, W, 3) in [0, 1]
    object_states: np.ndarray  # (T, 2) target centre in pixels
    actions: np.ndarray | None  # (T-1, 3): dx, dy, grasp
    instruction_id: int
    domain_id: int
    seed: int
    radius: float = TARGET_RADIUS

    @property
    def num_frames(self):
        return self.frames.shape[0]

    @property
    def image_shape(self):
        return self.frames.shape[1:3]

    @property
    def has_actions(self):
        return self.actions is not None


@dataclass(frozen=True)
class TrajectoryQuery:
    points: np.ndarray  # (K, 2) normalized (u, v)
    t: int = 0

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 2:
            raise ValueError(f"query points must be (K, 2), got {pts.shape}")
        if np.any(pts < 0) or np.any(pts > 1) or not np.all(np.isfinite(pts)):
            raise ValueError("query coordinates must lie in [0, 1]")
        object.__setattr__(self, "points", pts)


# --- scenes and dynamics -----------------------------------------------------------------


@dataclass
class Scene:
    """Static part of a rendered episode plus the scripted start pose."""

    background: tuple
    target_color: tuple
    distractor_centers: np.ndarray
    distractor_radii: np.ndarray
    distractor_colors: np.ndarray
    start: np.ndarray
    image_size: int
    radius: float = TARGET_RADIUS
    extra: dict = field(default_factory=dict)


def _sample_start(spec, rng):
    size = spec.image_size
    lo, hi = TARGET_RADIUS + 1.0, size - TARGET_RADIUS - 1.0
    if spec.dynamics_family == "arc_transport":
        ring = rng.uniform(0.22 * size, 0.3 * size)
        ang = rng.uniform(-math.pi, math.pi)
        cx, cy = spec.arc_center
        return quantize([cx + ring * math.cos(ang), cy + ring * math.sin(ang)])
    goal = np.asarray(spec.goal, dtype=np.float64)
    for _ in range(1000):
        p = quantize(rng.uniform(lo, hi, size=2))
        dist = np.abs(p - goal).sum() if spec.dynamics_family == "two_phase_pick_place" else np.linalg.norm(p - goal)
        if 0.25 * size <= dist <= 0.9 * size:
            return p
    raise RuntimeError("could not place a start pose")  # unreachable for sane specs


def scripted_path(spec, start, num_frames):
    """Object centre for every frame under the task's scripted controller."""
    s = spec.speed
    pos = np.empty((num_frames, 2))
    pos[0] = quantize(start)
    if spec.dynamics_family == "linear_push":
        goal = quantize(spec.goal)
        dist = np.linalg.norm(goal - pos[0])
        step = quantize((goal - pos[0]) / dist * s) if dist > 0 else np.zeros(2)
        step_len = np.linalg.norm(step)
        for t in range(1, num_frames):
            rem = goal - pos[t - 1]
            pos[t] = goal if np.linalg.norm(rem) <= step_len else pos[t - 1] + step
    elif spec.dynamics_family == "two_phase_pick_place":
        goal = quantize(spec.goal)
        qs = float(quantize(s))
        for t in range(1, num_frames):
            x, y = pos[t - 1]
            if y != goal[1]:
                y = y + float(np.clip(goal[1] - y, -qs, qs))
            elif x != goal[0]:
                x = x + float(np.clip(goal[0] - x, -qs, qs))
            pos[t] = (x, y)
    else:
        cx, cy = spec.arc_center
        ring = float(np.hypot(start[0] - cx, start[1] - cy))
        theta0 = math.atan2(start[1] - cy, start[0] - cx)
        diff = (spec.arc_goal_angle - theta0 + math.pi) % (2 * math.pi) - math.pi
        omega = s / ring
        for t in range(num_frames):
            theta = theta0 + math.copysign(min(t * omega, abs(diff)), diff)
            pos[t] = quantize([cx + ring * math.cos(theta), cy + ring * math.sin(theta)])
    return pos


def _place_distractors(spec, path, rng):
    _, _, colors = spec.palette()
    size = spec.image_size
    centers, radii, cols = [], [], []
    for i in range(spec.distractor_count):
        for _ in range(200):
            r = float(rng.uniform(2.0, 3.0))
            c = rng.uniform(r, size - r, size=2)
            clear_path = np.min(np.linalg.norm(path - c, axis=1)) > TARGET_RADIUS + r + 1.0
            clear_others = all(np.linalg.norm(c - o) > r + ro for o, ro in zip(centers, radii))
            if clear_path and clear_others:
                centers.append(c)
                radii.append(r)
                cols.append(colors[i % len(colors)])
                break
    return (
        np.asarray(centers, dtype=np.float64).reshape(-1, 2),
        np.asarray(radii, dtype=np.float64),
        np.asarray(cols, dtype=np.float64).reshape(-1, 3),
    )


def make_scene(spec, seed):
    """Deterministic scene for ``(spec, seed)``; also returns the scripted path."""
    rng = np.random.default_rng(seed)
    start = _sample_start(spec, rng)
    path = scripted_path(spec, start, spec.num_frames)
    centers, radii, colors = _place_distractors(spec, path, rng)
    bg, tgt, _ = spec.palette()
    scene = Scene(bg, tgt, centers, radii, colors, path[0].copy(), spec.image_size)
    return scene, path


def render_frame(scene, position):
    size = scene.image_size
    background = np.empty((size, size, 3))
    background[:] = scene.background
    centers = np.concatenate([scene.distractor_centers, np.asarray(position, dtype=np.float64).reshape(1, 2)])
    radii = np.concatenate([scene.distractor_radii, [scene.radius]])
    colors = np.concatenate([scene.distractor_colors, np.asarray(scene.target_color, dtype=np.float64).reshape(1, 3)])
    return kernels.rasterize_disks(size, size, background, centers, radii, colors, SUPERSAMPLE)


def target_coverage(position, radius, size):
    """Fractional target coverage map (target alone, unit intensity)."""
    return kernels.rasterize_disks(
        size, size, np.zeros((size, size, 3)), np.asarray(position, dtype=np.float64).reshape(1, 2),
        np.array([radius]), np.ones((1, 3)), SUPERSAMPLE,
    )[:, :, 0]


def actions_from_path(path):
    """Controller labels: displacement per step and a grasp flag that is 1 while moving."""
    delta = np.diff(path, axis=0)
    grasp = np.any(delta != 0, axis=1).astype(np.float64)
    return np.concatenate([delta, grasp[:, None]], axis=1)


def apply_action(state, action, max_step=None, bounds=None):
    """World transition: move by the commanded displacement while grasping."""
    state = np.asarray(state, dtype=np.float64)
    if action[2] <= 0.5:
        return state.copy()
    delta = np.asarray(action[:2], dtype=np.float64)
    if max_step is not None:
        delta = np.clip(delta, -max_step, max_step)
    nxt = state + delta
    if bounds is not None:
        nxt = np.clip(nxt, bounds[0], bounds[1])
    return nxt


def generate_episode(spec, task_seed):
    """Render one episode of ``spec`` from ``task_seed``; actions only for in-domain tasks."""
    scene, path = make_scene(spec, task_seed)
    frames = np.stack([render_frame(scene, p) for p in path])
    actions = actions_from_path(path) if spec.in_domain else None
    return Episode(frames, path, actions, spec.instruction_id, spec.domain_id, int(task_seed), scene.radius)


# --- tracks and point sampling -------------------------------------------------------------


def ground_truth_tracks(episode, query, horizon):
    """Analytic ``(H, K, 2)`` tracks for steps ``t+1 .. t+H`` of the query points.

    A point moves with the target iff it lies within the target radius at the
    query frame; every other point is stationary.
    """
    t = int(query.t)
    if horizon < 0 or t < 0 or t + horizon > episode.num_frames - 1:
        raise ValueError(f"horizon {horizon} from t={t} overflows an episode of {episode.num_frames} frames")
    height, width = episode.image_shape
    scale = np.array([width, height], dtype=np.float64)
    pts = query.points
    px = pts * scale
    on_target = np.linalg.norm(px - episode.object_states[t], axis=1) <= episode.radius
    disp = (episode.object_states[t + 1 : t + 1 + horizon] - episode.object_states[t]) / scale  # (H, 2)
    out = np.broadcast_to(pts, (horizon,) + pts.shape).copy()
    out[:, on_target] += disp[:, None, :]
    return out


def sample_points_variance_filter(frames, k, rng):
    """``k`` pixel-centre points drawn with probability proportional to temporal variance.

    Intensity is the channel mean; the floor keeps static clips uniform.
    Sampling is with replacement.
    """
    if k <= 0:
        raise ValueError("K must be positive")
    frames = np.asarray(frames, dtype=np.float64)
    if frames.shape[0] < 2:
        raise ValueError("variance filtering needs at least two frames")
    intensity = frames.mean(axis=-1) if frames.ndim == 4 else frames
    weight = intensity.var(axis=0) + VARIANCE_FLOOR
    height, width = weight.shape
    flat = weight.ravel()
    idx = rng.choice(flat.size, size=k, replace=True, p=flat / flat.sum())
    rows, cols = np.divmod(idx, width)
    return np.stack([(cols + 0.5) / width, (rows + 0.5) / height], axis=1)


def grid_shape(k):
    """Lattice used for ``k`` grid points: rows is the largest divisor of k not above sqrt(k)."""
    if k <= 0:
        raise ValueError("K must be positive")
    rows = max(d for d in range(1, math.isqrt(k) + 1) if k % d == 0)
    return rows, k // rows


def sample_points_grid(k, height=None, width=None):
    """Cell centres of a ``rows x cols`` lattice in row-major order (u varies fastest)."""
    rows, cols = grid_shape(k)
    v, u = np.meshgrid((np.arange(rows) + 0.5) / rows, (np.arange(cols) + 0.5) / cols, indexing="ij")
    return np.stack([u.ravel(), v.ravel()], axis=1)


# --- episode files ----------------------------------------------------------------------------


def episode_to_bytes(ep):
    t, h, w, _ = ep.frames.shape
    header = _HEADER.pack(
        EPISODE_MAGIC, EPISODE_VERSION, t, h, w, int(ep.domain_id), int(ep.instruction_id),
        int(ep.has_actions), int(ep.seed), float(ep.radius),
    )
    parts = [header, ep.frames.astype("<f8").tobytes(), ep.object_states.astype("<f8").tobytes()]
    if ep.has_actions:
        parts.append(ep.actions.astype("<f8").tobytes())
    return b"".join(parts)


def episode_from_bytes(buf):
    if len(buf) < _HEADER.size:
        raise ValueError("truncated episode header")
    magic, version, t, h, w, domain_id, instr, has_actions, seed, radius = _HEADER.unpack_from(buf)
    if magic != EPISODE_MAGIC:
        raise ValueError("not an episode file")
    if version != EPISODE_VERSION:
        raise ValueError(f"unsupported episode version {version}")
    sizes = [t * h * w * 3, t * 2] + ([(t - 1) * 3] if has_actions else [])
    expected = _HEADER.size + 8 * sum(sizes)
    if len(buf) != expected:
        raise ValueError(f"episode payload is {len(buf)} bytes, expected {expected}")
    off = _HEADER.size
    arrays = []
    for n in sizes:
        arrays.append(np.frombuffer(buf, dtype="<f8", count=n, offset=off).astype(np.float64))
        off += 8 * n
    frames = arrays[0].reshape(t, h, w, 3)
    states = arrays[1].reshape(t, 2)
    actions = arrays[2].reshape(t - 1, 3) if has_actions else None
    return Episode(frames, states, actions, instr, domain_id, seed, radius)


def write_episode(path, ep):
    with open(path, "wb") as fh:
        fh.write(episode_to_bytes(ep))


def read_episode(path):
    with open(path, "rb") as fh:
        return episode_from_bytes(fh.read())


# --- datasets -------------------------------------------------------------------------------------


def desk_domains(image_size=32, num_frames=24):
    """Two in-domain pick-place tasks and nine action-free tasks of mixed dynamics."""
    s = image_size / 32.0

    def pt(x, y):
        return (x * s, y * s)

    common = dict(image_size=image_size, num_frames=num_frames)
    return [
        DomainSpec(0, "two_phase_pick_place", 1.5, 0, 2, goal=pt(24, 8), in_domain=True, **common),
        DomainSpec(1, "two_phase_pick_place", 1.5, 0, 2, goal=pt(8, 24), in_domain=True,
                   target_color=(0.95, 0.75, 0.20), **common),
        DomainSpec(2, "linear_push", 1.0, 1, 2, goal=pt(8, 16), **common),
        DomainSpec(3, "linear_push", 2.0, 2, 1, goal=pt(24, 24), **common),
        DomainSpec(4, "linear_push", 0.75, 3, 3, goal=pt(16, 8), **common),
        DomainSpec(5, "arc_transport", 1.0, 4, 2, arc_center=pt(16, 16), arc_goal_angle=0.0, **common),
        DomainSpec(6, "arc_transport", 1.5, 1, 1, arc_center=pt(16, 16), arc_goal_angle=math.pi / 2, **common),
        DomainSpec(7, "two_phase_pick_place", 1.0, 2, 2, goal=pt(24, 24), **common),
        DomainSpec(8, "two_phase_pick_place", 2.0, 3, 2, goal=pt(8, 8), **common),
        DomainSpec(9, "linear_push", 1.5, 4, 2, goal=pt(24, 12), **common),
        DomainSpec(10, "arc_transport", 1.25, 0, 3, arc_center=pt(16, 16), arc_goal_angle=-math.pi / 2, **common),
    ]


SPLIT_CODES = {"in_domain": 0, "out_of_domain": 1, "validation": 2}


def episode_seed(root_seed, domain_id, split, index):
    ss = np.random.SeedSequence([int(root_seed), int(domain_id), SPLIT_CODES[split], int(index)])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


@dataclass
class DatasetManifest:
    root: str
    episodes: list
    mix_ratio: tuple
    params: dict
    digest: str = ""

    def split(self, name):
        return [e for e in self.episodes if e["split"] == name]

    def training(self):
        return [e for e in self.episodes if e["split"] != "validation"]

    def path(self, entry):
        return os.path.join(self.root, entry["path"])

    def load(self, entry):
        return read_episode(self.path(entry))

    def to_json(self):
        return json.dumps(
            {"mix_ratio": list(self.mix_ratio), "params": self.params, "episodes": self.episodes, "digest": self.digest},
            indent=1, sort_keys=True,
        )

    @classmethod
    def read(cls, path):
        with open(path) as fh:
            raw = json.load(fh)
        return cls(os.path.dirname(os.path.abspath(path)), raw["episodes"], tuple(raw["mix_ratio"]), raw["params"], raw["digest"])


def _digest(episodes, params, mix_ratio):
    blob = json.dumps({"episodes": episodes, "params": params, "mix_ratio": list(mix_ratio)}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()


def build_dataset(domain_specs, counts, mix_ratio, seed, out_dir, validation_count=4):
    """Write episode files and ``manifest.json`` under ``out_dir``.

    ``counts`` gives training episodes per in-domain and per out-of-domain task
    as ``(in_count, ood_count)``. ``mix_ratio = (ood, in)`` must match the
    resulting split sizes; ``(0, x)`` drops out-of-domain episodes entirely.
    Validation episodes come from a separate seed namespace for every task.
    """
    in_count, ood_count = (int(c) for c in counts)
    if in_count <= 0 or ood_count < 0 or validation_count < 0:
        raise ValueError("episode counts must be positive")
    ood_w, in_w = mix_ratio
    in_specs = [d for d in domain_specs if d.in_domain]
    ood_specs = [d for d in domain_specs if not d.in_domain]
    if ood_w == 0:
        ood_count = 0
    n_in, n_ood = in_count * len(in_specs), ood_count * len(ood_specs)
    if n_in == 0:
        raise ValueError("need at least one in-domain episode")
    if n_ood * in_w != n_in * ood_w:
        raise ValueError(f"counts give out/in = {n_ood}/{n_in}, which does not match mix ratio {ood_w}:{in_w}")
    os.makedirs(os.path.join(out_dir, "episodes"), exist_ok=True)
    entries = []
    plan = [(d, "in_domain", in_count) for d in in_specs] + [(d, "out_of_domain", ood_count) for d in ood_specs]
    plan += [(d, "validation", validation_count) for d in domain_specs]
    for spec, split, n in plan:
        for i in range(n):
            ep_seed = episode_seed(seed, spec.domain_id, split, i)
            ep = generate_episode(spec, ep_seed)
            rel = os.path.join("episodes", f"{split}_{spec.domain_id:02d}_{i:03d}.ep")
            data = episode_to_bytes(ep)
            with open(os.path.join(out_dir, rel), "wb") as fh:
                fh.write(data)
            entries.append({
                "path": rel, "split": split, "domain_id": spec.domain_id, "instruction_id": spec.instruction_id,
                "in_domain": bool(spec.in_domain), "has_actions": ep.has_actions, "seed": ep_seed,
                "sha256": hashlib.sha256(data).hexdigest(),
            })
    params = {
        "seed": int(seed), "counts": [in_count, ood_count], "validation_count": int(validation_count),
        "domains": [asdict(d) for d in domain_specs], "format_version": EPISODE_VERSION,
    }
    params = json.loads(json.dumps(params))  # tuples -> lists, matching what a reader sees
    manifest = DatasetManifest(os.path.abspath(out_dir), entries, tuple(mix_ratio), params)
    manifest.digest = _digest(entries, params, mix_ratio)
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        fh.write(manifest.to_json())
    return manifest


def verify_manifest(manifest):
    """Check files exist and hash correctly, splits are disjoint and the ratio holds."""
    seen = set()
    for e in manifest.episodes:
        key = (e["domain_id"], e["seed"])
        if key in seen:
            raise ValueError(f"episode {e['path']} appears in more than one split")
        seen.add(key)
        with open(manifest.path(e), "rb") as fh:
            data = fh.read()
        if hashlib.sha256(data).hexdigest() != e["sha256"]:
            raise ValueError(f"{e['path']} does not match its recorded hash")
        episode_from_bytes(data)
    n_in = len(manifest.split("in_domain"))
    n_ood = len(manifest.split("out_of_domain"))
    ood_w, in_w = manifest.mix_ratio
    if n_ood * in_w != n_in * ood_w:
        raise ValueError("split sizes do not match the mix ratio")
    if _digest(manifest.episodes, manifest.params, manifest.mix_ratio) != manifest.digest:
        raise ValueError("manifest digest mismatch")
    return True


def domains_from_params(params):
    return [DomainSpec(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in d.items()}) for d in params["domains"]]


# --- closed-loop world -----------------------------------------------------------------------------


class World:
    """Pick-and-place world driven by ``(dx, dy, grasp)`` actions."""

    def __init__(self, spec, seed, max_step=2.0, success_radius=2.0):
        self.spec = spec
        self.seed = int(seed)
        self.scene, _ = make_scene(spec, seed)
        self.goal = np.asarray(quantize(spec.goal), dtype=np.float64)
        self.max_step = float(max_step)
        self.success_radius = float(success_radius)
        r = self.scene.radius
        self.bounds = (r, spec.image_size - r)
        self.reset()

    def reset(self):
        self.state = np.array(self.scene.start, dtype=np.float64)
        self.steps = 0
        return self.observe()

    def observe(self):
        return render_frame(self.scene, self.state)

    def distance(self):
        return float(np.linalg.norm(self.state - self.goal))

    def success(self):
        return self.distance() <= self.success_radius

    def step(self, action):
        action = np.asarray(action, dtype=np.float64)
        if action.shape != (3,) or not np.all(np.isfinite(action)):
            raise ValueError(f"world step needs a finite (3,) action, got {action}")
        self.state = apply_action(self.state, action, self.max_step, self.bounds)
        self.steps += 1
        return self.observe()
