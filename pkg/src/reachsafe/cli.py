"""Command-line entry points for the experiment pipeline."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .cmdp import ConfigurationError
from .config import ABLATIONS, ExperimentConfig, default_config, load_config
from .critics import export_heatmap, load_critic
from .pipeline import (
    MissingArtifact,
    RunPaths,
    STAGES,
    StageMismatch,
    run_pipeline,
    stage_oracle,
)


def _load_cfg(args: argparse.Namespace) -> ExperimentConfig:
    if args.config:
        cfg = load_config(args.config)
    else:
        cfg = default_config(args.env)
    if args.seed is not None:
        cfg.seed = args.seed
    if getattr(args, "proposer", None):
        cfg.costgen.proposer = args.proposer
    toggles = []
    if getattr(args, "no_model", False):
        toggles.append("no-model")
    if getattr(args, "no_relabel", False):
        toggles.append("no-relabel")
    if getattr(args, "deterministic_rollout", False):
        toggles.append("det-rollout")
    if getattr(args, "no_conservative", False):
        toggles.append("no-conservative")
    if getattr(args, "ungated", False):
        toggles.append("ungated")
    if toggles and "ungated" in toggles and len(toggles) > 1:
        raise ConfigurationError("ungated cannot be combined with other toggles")
    if toggles:
        cfg.ablations = toggles
    cfg.validate()
    return cfg


def _add_common(p: argparse.ArgumentParser, ablations: bool = False) -> None:
    p.add_argument("--config", type=str, default="", help="key/value config file")
    p.add_argument("--env", type=str, default="gridworld",
                   choices=("gridworld", "double_integrator"),
                   help="built-in defaults when no config file is given")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", type=str, required=True, help="run directory")
    if ablations:
        p.add_argument("--no-model", action="store_true",
                       help="skip model rollouts; relabeled data only")
        p.add_argument("--no-relabel", action="store_true",
                       help="label rollouts only; keep original offline costs")
        p.add_argument("--deterministic-rollout", action="store_true",
                       help="no exploration noise during rollouts")
        p.add_argument("--no-conservative", action="store_true",
                       help="use the plain constraint, no conservative band")
        p.add_argument("--ungated", action="store_true",
                       help="reward-only weighted behavior cloning baseline")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="reachsafe",
        description="Model-based offline safe RL on desk-scale environments",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute the full pipeline")
    _add_common(p_run, ablations=True)
    p_run.add_argument("--stage", type=str, default="",
                       help="run a single stage instead of all "
                            f"({', '.join(STAGES)})")
    p_run.add_argument("--proposer", choices=("scripted", "remote"), default="")

    for name, stage in (("gen-data", "data"), ("train-dynamics", "dynamics"),
                        ("learn", "learn"), ("evaluate", "evaluate")):
        p = sub.add_parser(name, help=f"run the {stage} stage")
        _add_common(p, ablations=name in ("learn", "evaluate"))
        p.set_defaults(stage_name=stage)

    p_cost = sub.add_parser("gen-cost", help="run cost-function generation")
    _add_common(p_cost)
    p_cost.add_argument("--proposer", choices=("scripted", "remote"), default="")
    p_cost.set_defaults(stage_name="costgen")

    p_oracle = sub.add_parser(
        "oracle", help="brute-force feasibility labels and value-iteration check")
    _add_common(p_oracle)

    p_heat = sub.add_parser("export-heatmap",
                            help="export the critic's value surface as CSV")
    _add_common(p_heat, ablations=True)
    p_heat.add_argument("--resolution", type=int, default=41)

    p_abl = sub.add_parser("ablate", help="run the pipeline with toggles")
    _add_common(p_abl, ablations=True)
    p_abl.add_argument("--proposer", choices=("scripted", "remote"), default="")

    return parser


def _cmd_run(args: argparse.Namespace) -> int:
    cfg = _load_cfg(args)
    stages = (args.stage,) if getattr(args, "stage", "") else None
    paths = run_pipeline(cfg, args.out, stages=stages)
    print(f"run complete: {paths.root}")
    eval_path = paths.eval_csv(cfg)
    if eval_path.exists():
        print(eval_path.read_text().strip())
    return 0


def _cmd_stage(args: argparse.Namespace) -> int:
    cfg = _load_cfg(args)
    run_pipeline(cfg, args.out, stages=(args.stage_name,))
    print(f"stage {args.stage_name} complete in {args.out}")
    return 0


def _cmd_oracle(args: argparse.Namespace) -> int:
    cfg = _load_cfg(args)
    paths = RunPaths(root=Path(args.out))
    paths.root.mkdir(parents=True, exist_ok=True)
    report = stage_oracle(cfg, paths)
    print(json.dumps({
        "h_star": report["h_star"],
        "feasible_fraction": report["feasible_fraction"],
        "value_iteration_sign_agreement": report["value_iteration_sign_agreement"],
        "gamma_threshold": report["gamma_threshold"],
        "warnings": report["warnings"],
    }, indent=2, sort_keys=True))
    return 0


def _cmd_heatmap(args: argparse.Namespace) -> int:
    from .config import build_env

    cfg = _load_cfg(args)
    env = build_env(cfg)
    paths = RunPaths(root=Path(args.out))
    critic_dir = paths.critic_dir(cfg)
    if not (critic_dir / "critic.json").exists():
        raise MissingArtifact(f"no critic checkpoint under {critic_dir}")
    critic = load_critic(critic_dir, env)
    if env.margin_predicate is not None:
        from .costgen import load_final_candidate

        history = paths.cost_history(cfg)
        if history.exists():
            critic.cost_fn = load_final_candidate(history, env).predicate
    n = args.resolution
    if env.name == "double_integrator":
        (x_lo, x_hi, _), (v_lo, v_hi, _) = env.state_grid
        x_range, y_range = (x_lo, x_hi, n), (v_lo, v_hi, n)
        tail = None
    else:
        parts = env.name.split("_")[-1].split("x")
        w, h = int(parts[0]), int(parts[1])
        x_range, y_range = (0.0, float(w - 1), w), (0.0, float(h - 1), h)
        tail = np.zeros(env.d_s - 2)
    export_heatmap(paths.heatmap(cfg), critic.v_values, x_range, y_range,
                   fixed_tail=tail)
    print(f"heatmap written to {paths.heatmap(cfg)}")
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "run" or args.command == "ablate":
            return _cmd_run(args)
        if args.command == "oracle":
            return _cmd_oracle(args)
        if args.command == "export-heatmap":
            return _cmd_heatmap(args)
        return _cmd_stage(args)
    except (ConfigurationError, StageMismatch, MissingArtifact) as err:
        print(json.dumps({"error": str(err), "kind": type(err).__name__}),
              file=sys.stderr)
        return 2
    except Exception as err:  # noqa: BLE001 - still emit the machine-readable line
        print(json.dumps({"error": str(err), "kind": type(err).__name__}),
              file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
