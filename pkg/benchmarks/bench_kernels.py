"""Compare the compiled kernels against the numpy fallback.

Times each hot kernel on shapes taken from a desk-scale training batch, then a
full trajectory-model training step under each backend.

    python3 benchmarks/bench_kernels.py --repeats 20 --json-out bench.json
"""

import argparse
import json
import sys
import timeit

import numpy as np

from sparsetrack import kernels
from sparsetrack.numerics import AdamW, backward
from sparsetrack.synthdata import desk_domains, generate_episode
from sparsetrack.trackformer import build_model, desk_config, total_loss, windows_from_episodes

BATCH = 32
TOKENS = 1 + 16 + 32


def kernel_cases(rng):
    cfg = desk_config()
    rows = BATCH * TOKENS
    x_ff = rng.normal(size=(rows, cfg.ff_dim))
    x_d = rng.normal(size=(rows, cfg.model_dim))
    xhat, rstd = kernels.get_kernel("layer_norm_fwd", "python")(x_d, 1e-5)
    g = rng.normal(size=x_d.shape)
    idx = rng.integers(0, 64, size=rows)
    logits = rng.normal(size=(rows, cfg.num_experts))
    pix = rng.integers(0, 32, size=(2, BATCH * 16 * 32))
    centers = rng.uniform(4, 28, size=(4, 2))
    background = np.full((32, 32, 3), 0.2)
    colors = rng.uniform(size=(4, 3))
    return {
        "gelu_tanh": lambda k: k(x_ff),
        "layer_norm_fwd": lambda k: k(x_d, 1e-5),
        "layer_norm_bwd": lambda k: k(g, xhat, rstd),
        "index_add_rows": lambda k: k(np.zeros((64, cfg.model_dim)), idx, x_d),
        "top1_dispatch": lambda k: k(logits),
        "last_writer_map": lambda k: k(pix[0], pix[1], 32, 32),
        "rasterize_disks": lambda k: k(32, 32, background, centers, np.full(4, 4.5), colors, 4),
    }


def time_call(fn, repeats):
    fn()
    return min(timeit.repeat(fn, number=1, repeat=repeats))


def bench_kernels(backends, repeats, seed):
    rng = np.random.default_rng(seed)
    cases = kernel_cases(rng)
    out = {}
    for name, case in cases.items():
        out[name] = {b: time_call(lambda: case(kernels.get_kernel(name, b)), repeats) for b in backends}
    return out


def training_step_setup(seed):
    cfg = desk_config()
    episodes = [generate_episode(spec, seed + i) for i, spec in enumerate(desk_domains())]
    data = windows_from_episodes(episodes, cfg.horizon, cfg.num_points).subset(np.arange(BATCH))
    model = build_model(cfg, seed)
    model.train()
    opt = AdamW(model.named_parameters(), 1e-4, 1e-4)
    drop, noise = np.random.default_rng(seed), np.random.default_rng(seed + 1)

    def step():
        pred, routed = model.forward(data.images, data.points, data.instr, drop, noise, training=True)
        parts = total_loss(pred, data.targets, routed, cfg)
        opt.zero_grad()
        backward(parts.total)
        opt.step(1e-4)

    return step


def bench_training_step(backends, repeats, seed):
    step = training_step_setup(seed)
    previous = kernels.BACKEND
    out = {}
    try:
        for b in backends:
            kernels.use_backend(b)
            out[b] = time_call(step, repeats)
    finally:
        kernels.use_backend(previous)
    return out


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeats", type=int, default=10)
    parser.add_argument("--step-repeats", type=int, default=3)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--skip-step", action="store_true", help="only time individual kernels")
    parser.add_argument("--json-out")
    args = parser.parse_args(argv)

    backends = kernels.available_backends()
    if "compiled" not in backends:
        print("compiled extension not built; timing the fallback only", file=sys.stderr)
    results = {"backends": backends, "kernels": bench_kernels(backends, args.repeats, args.seed)}
    if not args.skip_step:
        results["training_step"] = bench_training_step(backends, args.step_repeats, args.seed)

    print(f"{'kernel':<18}" + "".join(f"{b + ' ms':>14}" for b in backends) + f"{'speedup':>10}")
    rows = list(results["kernels"].items())
    if "training_step" in results:
        rows.append(("training_step", results["training_step"]))
    for name, times in rows:
        line = f"{name:<18}" + "".join(f"{1e3 * times[b]:>14.3f}" for b in backends)
        if len(backends) == 2:
            line += f"{times['python'] / times['compiled']:>9.2f}x"
        print(line)
    if args.json_out:
        with open(args.json_out, "w") as fh:
            json.dump(results, fh, indent=1)
    return 0


if __name__ == "__main__":
    sys.exit(main())
