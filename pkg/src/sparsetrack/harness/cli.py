"""Command-line entry point: ``sparsetrack <subcommand> [flags]``.

All flags and configs are validated before anything is written, so a bad
invocation exits with status 2 and leaves the filesystem untouched.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace

from .config import ConfigError, ExperimentConfig, echo_config, load_config, override


def int_list(text):
    if text.strip().lower() in ("", "none"):
        return ()
    try:
        return tuple(int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def ratio(text):
    vals = int_list(text)
    if len(vals) != 2 or min(vals) < 0 or vals[1] == 0:
        raise argparse.ArgumentTypeError(f"expected OOD,IN with IN > 0, got {text!r}")
    return vals


def positive_int(text):
    try:
        val = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if val <= 0:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {val}")
    return val


def nonneg_int(text):
    try:
        val = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if val < 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative integer, got {val}")
    return val


def positive_float(text):
    try:
        val = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number, got {text!r}") from None
    if not val > 0:
        raise argparse.ArgumentTypeError(f"expected a positive number, got {val}")
    return val


def existing_path(text):
    if not os.path.exists(text):
        raise argparse.ArgumentTypeError(f"{text} does not exist")
    return text


def build_parser():
    parser = argparse.ArgumentParser(prog="sparsetrack", description="Sparse-expert trajectory models on a synthetic desk world.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", type=existing_path, help="YAML or JSON experiment config")
        p.add_argument("--seed", type=nonneg_int, help="override the run seed")

    p = sub.add_parser("gen-data", help="generate a synthetic episode dataset")
    common(p)
    p.add_argument("--preset", choices=("desk", "full"))
    p.add_argument("--out", required=True)
    p.add_argument("--mix-ratio", type=ratio, help="OOD,IN episode ratio, e.g. 9,2")
    p.add_argument("--in-count", type=positive_int)
    p.add_argument("--ood-count", type=nonneg_int)

    p = sub.add_parser("train-traj", help="train a trajectory model")
    common(p)
    p.add_argument("--preset", choices=("desk", "full"))
    p.add_argument("--data", type=existing_path, required=True, help="dataset directory")
    p.add_argument("--out", required=True)
    p.add_argument("--moe-layers", type=int_list, help="comma-separated block indices, or 'none'")
    p.add_argument("--experts", type=positive_int)
    p.add_argument("--top-k", type=positive_int)
    p.add_argument("--epochs", type=positive_int)
    p.add_argument("--lr", type=positive_float)
    p.add_argument("--dense", action="store_true", help="drop every MoE layer")

    p = sub.add_parser("train-policy", help="behaviour-clone a policy on frozen trajectory predictions")
    common(p)
    p.add_argument("--data", type=existing_path, required=True)
    p.add_argument("--traj-ckpt", type=existing_path, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mask-mode", choices=("adaptive", "hand_drawn", "none"))
    p.add_argument("--epochs", type=positive_int)
    p.add_argument("--gt-tracks", action="store_true", help="condition on analytic tracks instead of predictions")

    p = sub.add_parser("eval-traj", help="validation MSE of a trajectory checkpoint")
    p.add_argument("--ckpt", type=existing_path, required=True)
    p.add_argument("--data", type=existing_path, required=True)
    p.add_argument("--out", help="write the JSON result here as well as to stdout")

    p = sub.add_parser("eval-policy", help="closed-loop success rate of a policy")
    p.add_argument("--policy", type=existing_path, required=True)
    p.add_argument("--traj-ckpt", type=existing_path, required=True)
    p.add_argument("--data", type=existing_path, required=True)
    p.add_argument("--seed", type=nonneg_int, default=0)
    p.add_argument("--rollouts", type=positive_int, default=20)
    p.add_argument("--max-steps", type=nonneg_int, default=60)
    p.add_argument("--out", help="write rollout records (JSONL) here")

    p = sub.add_parser("compare", help="train several arms over several seeds and report")
    common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", type=int_list, default=(0, 1, 2))
    p.add_argument("--arms", help="comma-separated arm names (default: every standard arm)")
    p.add_argument("--scaled", action="store_true", help="add width- and depth-scaled dense arms")
    p.add_argument("--no-data-mixes", action="store_true", help="skip the in-domain-only arms")
    p.add_argument("--data-root", help="directory for shared datasets")
    p.add_argument("--grid", type=existing_path, help="YAML/JSON file with an 'arms' list replacing the standard arms")
    p.add_argument("--jobs", type=positive_int, default=1, help="worker processes for independent runs")
    p.add_argument("--policy-eval", action="store_true", help="also train and roll out a policy per run")

    p = sub.add_parser("report", help="aggregate the results of a compare run")
    p.add_argument("--run-dir", type=existing_path, required=True)
    p.add_argument("--plots", action="store_true", help="also write SVG loss curves")
    return parser


def resolve_config(args, parser):
    """Merge config file and flags into a validated :class:`ExperimentConfig`."""
    try:
        cfg = load_config(args.config) if getattr(args, "config", None) else ExperimentConfig()
        if getattr(args, "seed", None) is not None:
            cfg = override(cfg, None, seed=args.seed)
        if getattr(args, "preset", None):
            cfg = override(cfg, "data", preset=args.preset)
            if args.preset == "full":
                from ..trackformer import full_scale_config

                cfg = replace(cfg, trackformer=full_scale_config())
                cfg = override(cfg, "data", image_size=cfg.trackformer.image_size)
        data = {}
        if getattr(args, "mix_ratio", None):
            data["mix_ratio"] = args.mix_ratio
        if getattr(args, "in_count", None):
            data["in_count"] = args.in_count
        if getattr(args, "ood_count", None) is not None:
            data["ood_count"] = args.ood_count
        if args.command == "gen-data" and getattr(args, "seed", None) is not None:
            data["seed"] = args.seed
        if data:
            cfg = override(cfg, "data", **data)
        traj = {}
        if getattr(args, "moe_layers", None) is not None:
            traj["moe_layer_indices"] = args.moe_layers
        if getattr(args, "experts", None):
            traj["num_experts"] = args.experts
        if getattr(args, "top_k", None):
            traj["k"] = args.top_k
        if getattr(args, "dense", False):
            traj["moe_layer_indices"] = ()
        if traj:
            cfg = override(cfg, "trackformer", **traj)
        if args.command == "train-traj":
            changes = {k: v for k, v in (("epochs", args.epochs), ("lr", args.lr)) if v is not None}
            if changes:
                cfg = override(cfg, "traj_train", **changes)
        if args.command == "train-policy":
            if args.mask_mode:
                cfg = override(cfg, "policy", mask_mode=args.mask_mode)
            if args.gt_tracks:
                cfg = override(cfg, "policy", ground_truth_tracks=True)
            if args.epochs:
                cfg = override(cfg, "policy_train", epochs=args.epochs)
    except (ConfigError, ValueError, OSError) as exc:
        parser.error(str(exc))
    return cfg


def _load_grid(path):
    import yaml

    with open(path) as fh:
        raw = yaml.safe_load(fh) or {}
    if not isinstance(raw, dict) or set(raw) != {"arms"}:
        raise ConfigError("grid file must hold exactly one key, 'arms'")
    return raw["arms"]


def _print_json(obj, path=None):
    text = json.dumps(obj, indent=1, sort_keys=True)
    print(text)
    if path:
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(path, "w") as fh:
            fh.write(text + "\n")


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    from . import experiments as ex

    if args.command == "gen-data":
        cfg = resolve_config(args, parser)
        manifest = ex.prepare_dataset(cfg.data, args.out)
        _print_json({"out": os.path.abspath(args.out), "train_episodes": len(manifest.training()),
                     "validation_episodes": len(manifest.split("validation")), "digest": manifest.digest})
    elif args.command == "train-traj":
        cfg = resolve_config(args, parser)
        from ..synthdata import DatasetManifest

        manifest = DatasetManifest.read(os.path.join(args.data, "manifest.json"))
        arm = ex.Arm("dense" if not cfg.trackformer.moe_layer_indices else "moe", cfg.trackformer, manifest.mix_ratio)
        summary = ex.run_traj_arm(cfg, arm, manifest, cfg.seed, args.out)
        _print_json({k: summary[k] for k in ("arm", "seed", "in_domain", "overall", "stationary_in_domain", "checkpoint")
                     if k in summary})
    elif args.command == "train-policy":
        cfg = resolve_config(args, parser)
        from ..synthdata import DatasetManifest

        manifest = DatasetManifest.read(os.path.join(args.data, "manifest.json"))
        _model, _traj, info = ex.run_policy(cfg, manifest, args.traj_ckpt, cfg.policy.mask_mode, cfg.seed, args.out)
        _print_json(info)
    elif args.command == "eval-traj":
        from ..synthdata import DatasetManifest
        from ..trackformer import load_checkpoint

        manifest = DatasetManifest.read(os.path.join(args.data, "manifest.json"))
        _print_json(ex.eval_traj(load_checkpoint(args.ckpt), manifest), args.out)
    elif args.command == "eval-policy":
        from ..policy import load_policy, rollout_records_json
        from ..synthdata import DatasetManifest
        from ..trackformer import load_checkpoint

        manifest = DatasetManifest.read(os.path.join(args.data, "manifest.json"))
        rate, records = ex.eval_policy(load_policy(args.policy), load_checkpoint(args.traj_ckpt),
                                       ex.pick_place_specs(manifest), args.seed, args.rollouts, args.max_steps)
        if args.out:
            os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
            with open(args.out, "w") as fh:
                fh.write(rollout_records_json(records))
        _print_json({"success_rate": rate, "rollouts": len(records)})
    elif args.command == "compare":
        cfg = resolve_config(args, parser)
        try:
            if args.grid:
                arms = ex.arms_from_grid(cfg, _load_grid(args.grid))
            else:
                arms = ex.standard_arms(cfg, data_mixes=not args.no_data_mixes, scaled=args.scaled)
        except (ConfigError, ValueError) as exc:
            parser.error(str(exc))
        if args.arms:
            wanted = args.arms.split(",")
            known = {a.name for a in arms}
            unknown = [w for w in wanted if w not in known]
            if unknown:
                parser.error(f"unknown arms {unknown}; choose from {sorted(known)}")
            arms = [a for a in arms if a.name in wanted]
        if len(arms) < 2:
            parser.error("a comparison needs at least two arms")
        if not args.seeds:
            parser.error("--seeds must list at least one seed")
        echo_config(cfg, args.out)
        _results, report = ex.compare(cfg, arms, args.seeds, args.out, args.data_root, jobs=args.jobs,
                                      policy_eval=args.policy_eval)
        _print_json({arm: s["in_domain_mse"] for arm, s in report.items()})
    elif args.command == "report":
        report = ex.write_report(args.run_dir, plots=args.plots)
        _print_json({arm: s["in_domain_mse"] for arm, s in report.items()})
    return 0


if __name__ == "__main__":
    sys.exit(main())
