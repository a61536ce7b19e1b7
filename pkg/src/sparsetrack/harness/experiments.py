"""Experiment runners shared by the CLI and the acceptance suite.

Every run writes into its own directory: the resolved config, a metrics JSONL,
a checkpoint and a ``result.json``. ``write_report`` aggregates those results.
"""

from __future__ import annotations

import csv
import json
import math
import os
import time
import warnings
from dataclasses import dataclass, replace

import numpy as np

from .. import policy as pol
from ..synthdata import DatasetManifest, World, build_dataset, desk_domains, verify_manifest
from ..trackformer import (
    active_parameters_per_token,
    count_parameters,
    evaluate_mse,
    load_checkpoint,
    save_checkpoint,
    stationary_mse,
    train,
    windows_from_episodes,
)
from .config import echo_config
from .scaling import scale_dense_to_match

ROLLOUT_SEED_BASE = 1_000_003


# --- data ----------------------------------------------------------------------------------------


def data_dir_name(mix_ratio):
    return f"mix_{mix_ratio[0]}_{mix_ratio[1]}"


def prepare_dataset(data_cfg, out_dir, mix_ratio=None):
    """Build the dataset, or reuse one already at ``out_dir`` with the same parameters."""
    mix_ratio = tuple(mix_ratio or data_cfg.mix_ratio)
    manifest_path = os.path.join(out_dir, "manifest.json")
    ood_count = data_cfg.ood_count if mix_ratio[0] else 0
    if os.path.exists(manifest_path):
        manifest = DatasetManifest.read(manifest_path)
        same = (manifest.params["seed"] == data_cfg.seed and manifest.params["counts"] == [data_cfg.in_count, ood_count]
                and manifest.params["validation_count"] == data_cfg.validation_count
                and tuple(manifest.mix_ratio) == mix_ratio
                and manifest.params["domains"][0]["image_size"] == data_cfg.image_size
                and manifest.params["domains"][0]["num_frames"] == data_cfg.num_frames)
        if same:
            verify_manifest(manifest)
            return manifest
        raise ValueError(f"{out_dir} already holds a dataset with different parameters")
    domains = desk_domains(data_cfg.image_size, data_cfg.num_frames)
    return build_dataset(domains, (data_cfg.in_count, ood_count), mix_ratio, data_cfg.seed, out_dir,
                         data_cfg.validation_count)


def validation_windows(manifest, cfg, in_domain=None):
    entries = [e for e in manifest.split("validation") if in_domain is None or e["in_domain"] == in_domain]
    return windows_from_episodes([manifest.load(e) for e in entries], cfg.horizon, cfg.num_points)


def training_windows(manifest, cfg):
    return windows_from_episodes([manifest.load(e) for e in manifest.training()], cfg.horizon, cfg.num_points)


# --- routing statistics ----------------------------------------------------------------------------


def utilization_histograms(routing_counts):
    """``{domain: {layer: fractions}}``; every row sums to one."""
    out = {}
    for (dom, layer), counts in sorted(routing_counts.items()):
        counts = np.asarray(counts, dtype=float)
        out.setdefault(int(dom), {})[int(layer)] = (counts / counts.sum()).tolist()
    return out


def entropy_nats(fractions):
    p = np.asarray(fractions, dtype=float)
    p = p[p > 0]
    return float(-(p * np.log(p)).sum())


def mean_utilization_entropy(histograms):
    rows = [row for layers in histograms.values() for row in layers.values()]
    if not rows:
        return float("nan")
    return float(np.mean([entropy_nats(r) for r in rows]))


# --- trajectory model ------------------------------------------------------------------------------


def eval_traj(model, manifest):
    """Validation MSE overall, in-domain, out-of-domain and per domain, plus the stationary reference."""
    cfg = model.config
    if not manifest.split("validation"):
        raise ValueError("validation split is empty")
    out = {"dataset_digest": manifest.digest}
    for name, flag in (("overall", None), ("in_domain", True), ("out_of_domain", False)):
        windows = validation_windows(manifest, cfg, flag)
        if len(windows) == 0:
            continue
        ev = evaluate_mse(model, windows)
        out[name] = ev["mse"]
        out[f"stationary_{name}"] = stationary_mse(windows)
        if flag is None:
            out["per_domain"] = {str(k): v for k, v in ev["per_domain"].items()}
            hist = utilization_histograms(ev["routing_counts"])
            out["utilization"] = {str(d): {str(l): row for l, row in layers.items()} for d, layers in hist.items()}
            out["mean_entropy"] = mean_utilization_entropy(hist)
            out["num_experts"] = cfg.num_experts
    return out


@dataclass(frozen=True)
class Arm:
    name: str
    trackformer: object
    mix_ratio: tuple


def standard_arms(exp_cfg, data_mixes=True, scaled=False):
    """MoE and equal-active-parameter dense arms, optionally with an in-domain-only
    data mix and dense baselines scaled to the MoE's total parameter count."""
    moe = exp_cfg.trackformer
    dense = moe.dense()
    mix = tuple(exp_cfg.data.mix_ratio)
    arms = [Arm("moe", moe, mix), Arm("dense", dense, mix)]
    if data_mixes:
        in_only = (0, mix[1])
        arms += [Arm("moe_in_only", moe, in_only), Arm("dense_in_only", dense, in_only)]
    if scaled:
        target = count_parameters(moe)
        for axis in ("width", "depth"):
            arms.append(Arm(f"dense_{axis}", scale_dense_to_match(dense, target, axis).config, mix))
    return arms


GRID_KEYS = {"name", "trackformer", "mix_ratio", "dense", "scale_axis"}


def arms_from_grid(exp_cfg, entries):
    """Arms from a list of mappings with keys ``name``, ``trackformer`` (field
    overrides), ``mix_ratio``, ``dense`` and ``scale_axis``.

    ``scale_axis`` grows the dense version of the arm until it matches the total
    parameter count of the MoE model the arm would otherwise be.
    """
    from .config import ConfigError, override

    arms = []
    for i, entry in enumerate(entries or []):
        if not isinstance(entry, dict):
            raise ConfigError(f"grid entry {i}: expected a mapping")
        unknown = sorted(set(entry) - GRID_KEYS)
        if unknown:
            raise ConfigError(f"grid entry {i}: unknown keys {unknown}")
        if "name" not in entry:
            raise ConfigError(f"grid entry {i}: missing name")
        traj = override(exp_cfg, "trackformer", **(entry.get("trackformer") or {})).trackformer
        if entry.get("scale_axis"):
            traj = scale_dense_to_match(traj.dense(), count_parameters(traj), entry["scale_axis"]).config
        elif entry.get("dense"):
            traj = traj.dense()
        mix = tuple(entry.get("mix_ratio") or exp_cfg.data.mix_ratio)
        arms.append(Arm(str(entry["name"]), traj, mix))
    names = [a.name for a in arms]
    if len(set(names)) != len(names):
        raise ConfigError(f"duplicate arm names in {names}")
    return arms


def run_traj_arm(exp_cfg, arm, manifest, seed, run_dir):
    """Train one arm for one seed and write its artefacts into ``run_dir``."""
    os.makedirs(run_dir, exist_ok=True)
    cfg_used = replace(exp_cfg, seed=seed, output_dir=run_dir, trackformer=arm.trackformer,
                       data=replace(exp_cfg.data, mix_ratio=tuple(arm.mix_ratio)))
    echo_config(cfg_used, run_dir)
    metrics_path = os.path.join(run_dir, "metrics.jsonl")
    if os.path.exists(metrics_path):
        os.remove(metrics_path)
    windows = training_windows(manifest, arm.trackformer)
    tc = exp_cfg.traj_train
    start = time.perf_counter()
    result = train(windows, arm.trackformer, tc.optimizer(), seed=seed, batch_size=tc.batch_size,
                   metrics_path=metrics_path)
    wall = time.perf_counter() - start
    ckpt = os.path.join(run_dir, "trackformer.npz")
    save_checkpoint(ckpt, result.model, extra={"arm": arm.name, "seed": seed})
    summary = {
        "arm": arm.name, "seed": seed, "mix_ratio": list(arm.mix_ratio), "wall_time_s": wall,
        "train_windows": len(windows), "final_train_loss": result.final_loss,
        "total_params": count_parameters(arm.trackformer),
        "active_params": active_parameters_per_token(arm.trackformer),
        "checkpoint": os.path.abspath(ckpt),
    }
    summary.update(eval_traj(result.model, manifest))
    with open(os.path.join(run_dir, "result.json"), "w") as fh:
        json.dump(summary, fh, indent=1, sort_keys=True)
    return summary


def _run_job(job):
    exp_cfg, arm, manifest, seed, run_dir, policy_eval = job
    try:
        result = run_traj_arm(exp_cfg, arm, manifest, seed, run_dir)
        if policy_eval:
            policy, traj, _ = run_policy(exp_cfg, manifest, result["checkpoint"], exp_cfg.policy.mask_mode, seed,
                                         os.path.join(run_dir, "policy"))
            result["success_rate"], _ = eval_policy(policy, traj, pick_place_specs(manifest), seed,
                                                    exp_cfg.eval.rollouts_per_seed, exp_cfg.eval.max_steps,
                                                    exp_cfg.eval.success_radius)
    except Exception as exc:  # recorded so the report can flag the gap
        result = {"arm": arm.name, "seed": seed, "mix_ratio": list(arm.mix_ratio), "dataset_digest": manifest.digest,
                  "total_params": count_parameters(arm.trackformer),
                  "active_params": active_parameters_per_token(arm.trackformer),
                  "failed": True, "error": f"{type(exc).__name__}: {exc}"}
    os.makedirs(run_dir, exist_ok=True)
    with open(os.path.join(run_dir, "result.json"), "w") as fh:
        json.dump(result, fh, indent=1, sort_keys=True)
    return result


def compare(exp_cfg, arms, seeds, out_dir, data_root=None, jobs=1, policy_eval=False):
    """Train every arm for every seed on shared datasets, then write the report.

    Runs are independent and each has its own directory, so with ``jobs > 1``
    they execute in worker processes; the report is written after all finish.
    A failing run is recorded in the report rather than aborting the rest.
    """
    if len(arms) < 2:
        raise ValueError("a comparison needs at least two arms")
    if not seeds:
        raise ValueError("a comparison needs at least one seed")
    data_root = data_root or os.path.join(out_dir, "data")
    manifests = {}
    for arm in arms:
        mix = tuple(arm.mix_ratio)
        if mix not in manifests:
            manifests[mix] = prepare_dataset(exp_cfg.data, os.path.join(data_root, data_dir_name(mix)), mix)
    job_list = [(exp_cfg, arm, manifests[tuple(arm.mix_ratio)], seed,
                 os.path.join(out_dir, "runs", arm.name, f"seed_{seed}"), policy_eval)
                for arm in arms for seed in seeds]
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_job, job_list))
    else:
        results = [_run_job(job) for job in job_list]
    report = write_report(out_dir, results)
    return results, report


# --- policy ----------------------------------------------------------------------------------------


def pick_place_specs(manifest):
    from ..synthdata import domains_from_params

    return [d for d in domains_from_params(manifest.params) if d.in_domain]


def run_policy(exp_cfg, manifest, traj_checkpoint, mask_mode, seed, run_dir, policy_cfg=None):
    """Behaviour-clone a policy on in-domain demonstrations using frozen trajectory predictions."""
    os.makedirs(run_dir, exist_ok=True)
    pcfg = policy_cfg or replace(exp_cfg.policy, mask_mode=mask_mode)
    echo_config(replace(exp_cfg, seed=seed, output_dir=run_dir, policy=pcfg), run_dir)
    traj_model = load_checkpoint(traj_checkpoint)
    episodes = [manifest.load(e) for e in manifest.training() if e["in_domain"]]
    demos = pol.build_demo_set(episodes, traj_model, pcfg)
    metrics_path = os.path.join(run_dir, "metrics.jsonl")
    if os.path.exists(metrics_path):
        os.remove(metrics_path)
    tc = exp_cfg.policy_train
    start = time.perf_counter()
    result = pol.train_policy(demos, pcfg, tc.optimizer(), seed=seed, batch_size=tc.batch_size,
                              metrics_path=metrics_path)
    wall = time.perf_counter() - start
    path = os.path.join(run_dir, "policy.npz")
    pol.save_policy(path, result.model)
    return result.model, traj_model, {"mask_mode": pcfg.mask_mode, "seed": seed, "wall_time_s": wall,
                                       "final_bc_mse": result.final_loss, "checkpoint": os.path.abspath(path)}


def rollout_seeds(seed, count):
    return [ROLLOUT_SEED_BASE + 10_000 * seed + i for i in range(count)]


def eval_policy(policy_model, traj_model, specs, seed, rollouts, max_steps, success_radius=2.0):
    """``rollouts`` closed-loop episodes split evenly across ``specs``."""
    per_task = math.ceil(rollouts / len(specs))
    worlds = []
    for j, spec in enumerate(specs):
        for s in rollout_seeds(seed, per_task):
            worlds.append(World(spec, s + 1000 * j, success_radius=success_radius))
    worlds = worlds[:rollouts]
    records = pol.rollout_batch(policy_model, traj_model, worlds, max_steps)
    return float(np.mean([r["success"] for r in records])), records


# --- reporting -------------------------------------------------------------------------------------


def _spread(values):
    vals = [v for v in values if v is not None]
    if not vals:
        return {"median": None, "min": None, "max": None}
    return {"median": float(np.median(vals)), "min": float(np.min(vals)), "max": float(np.max(vals))}


def load_results(out_dir):
    results = []
    runs = os.path.join(out_dir, "runs")
    for root, _dirs, files in sorted(os.walk(runs)):
        if "result.json" in files:
            with open(os.path.join(root, "result.json")) as fh:
                results.append(json.load(fh))
    return results


def aggregate(results):
    """Per-arm medians with min/max over seeds; arms on one data mix must share a digest."""
    by_arm = {}
    for r in results:
        by_arm.setdefault(r["arm"], []).append(r)
    digests = {}
    for r in results:
        key = tuple(r["mix_ratio"])
        if digests.setdefault(key, r["dataset_digest"]) != r["dataset_digest"]:
            raise ValueError(f"runs on mix {key} used different datasets")
    summary = {}
    for arm, runs in sorted(by_arm.items()):
        runs = sorted(runs, key=lambda r: r["seed"])
        ok = [r for r in runs if not r.get("failed")]
        summary[arm] = {
            "seeds": [r["seed"] for r in runs],
            "failed_seeds": [r["seed"] for r in runs if r.get("failed")],
            "errors": [r["error"] for r in runs if r.get("failed")],
            "gaps": len(ok) < len(runs),
            "mix_ratio": runs[0]["mix_ratio"],
            "dataset_digest": runs[0]["dataset_digest"],
            "total_params": runs[0]["total_params"],
            "active_params": runs[0]["active_params"],
            "in_domain_mse": _spread([r.get("in_domain") for r in ok]),
            "overall_mse": _spread([r.get("overall") for r in ok]),
            "out_of_domain_mse": _spread([r.get("out_of_domain") for r in ok]),
            "per_domain_mse": {d: _spread([r["per_domain"].get(d) for r in ok])
                               for d in sorted({d for r in ok for d in r["per_domain"]}, key=int)},
            "stationary_in_domain_mse": ok[0].get("stationary_in_domain") if ok else None,
            "success_rate": _spread([r.get("success_rate") for r in ok]),
            "mean_entropy": _spread([r.get("mean_entropy") for r in ok]),
            "wall_time_s": _spread([r.get("wall_time_s") for r in ok]),
            "utilization": {str(r["seed"]): r.get("utilization", {}) for r in ok},
        }
    return summary


CSV_FIELDS = ["arm", "mix_ratio", "total_params", "active_params", "in_domain_median", "in_domain_min",
              "in_domain_max", "overall_median", "stationary_in_domain", "success_rate_median", "mean_entropy_median",
              "wall_time_max_s", "failed_seeds"]


def write_report(out_dir, results=None, plots=False):
    results = results if results is not None else load_results(out_dir)
    summary = aggregate(results)
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "report.json"), "w") as fh:
        json.dump(summary, fh, indent=1, sort_keys=True)
    with open(os.path.join(out_dir, "report.csv"), "w", newline="") as fh:
        writer = csv.DictWriter(fh, CSV_FIELDS)
        writer.writeheader()
        for arm, s in summary.items():
            writer.writerow({
                "arm": arm, "mix_ratio": ":".join(map(str, s["mix_ratio"])), "total_params": s["total_params"],
                "active_params": s["active_params"], "in_domain_median": s["in_domain_mse"]["median"],
                "in_domain_min": s["in_domain_mse"]["min"], "in_domain_max": s["in_domain_mse"]["max"],
                "overall_median": s["overall_mse"]["median"], "stationary_in_domain": s["stationary_in_domain_mse"],
                "success_rate_median": s["success_rate"]["median"],
                "mean_entropy_median": s["mean_entropy"]["median"], "wall_time_max_s": s["wall_time_s"]["max"],
                "failed_seeds": " ".join(map(str, s["failed_seeds"])),
            })
    if plots:
        try:
            plot_curves(out_dir, summary)
        except ImportError:
            warnings.warn("matplotlib is not installed; skipping plots")
    return summary


def plot_curves(out_dir, summary):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    for arm, s in summary.items():
        for seed in s["seeds"]:
            path = os.path.join(out_dir, "runs", arm, f"seed_{seed}", "metrics.jsonl")
            if not os.path.exists(path):
                continue
            with open(path) as fh:
                rows = [json.loads(line) for line in fh]
            ax.plot([r["epoch"] for r in rows], [r["l_tra"] for r in rows], label=f"{arm} s{seed}")
    ax.set_yscale("log")
    ax.set_xlabel("epoch")
    ax.set_ylabel("trajectory loss")
    ax.legend(fontsize=6)
    fig.tight_layout()
    fig.savefig(os.path.join(out_dir, "loss_curves.svg"))
    plt.close(fig)
