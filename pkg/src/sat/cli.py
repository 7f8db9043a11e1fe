"""Single executable driving the full pipeline.

Subcommands: gen-data | train | eval | rollout | grad-check |
export-codebook | stats | params. Configuration comes from one key=value
file (--config) plus command-line overrides; every run that produces files
writes the fully resolved configuration next to them, and print-only
subcommands do the same when given --out-dir. All subcommands are
deterministic under --seed.

Exit codes: 0 success, 1 usage/config error, 2 data error (missing or
malformed files, unknown ids), 3 numeric failure.
"""

import argparse
import dataclasses
import sys
from pathlib import Path

import numpy as np

from .autodiff import NumericError
from .checkpoint import CheckpointError
from .config import (RunConfig, build_run_config, dump_run_config,
                     load_config_file, parse_overrides)
from .diagnostics import gradient_suite
from .embodiment import (FUNCTION_NAMES, ROTATION_NAMES, CodebookTables,
                         export_codebook, frequency_csv, functional_frequency)
from .model import count_params, init_params, param_breakdown
from .synthdata import (DEFAULT_INSTRUCTION, ShardError,
                        default_benchmark_specs, generate_dataset,
                        read_dataset)
from .training import (EVAL_NOISE_STREAM, Policy, TrainingError,
                       euler_sample, evaluate_policy, train_loop)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


# ---------------------------------------------------------------------------
# config plumbing


def _resolve_run(args) -> RunConfig:
    """Layer config sources: file, then key=value overrides, then flags."""
    dicts = []
    if getattr(args, "config", None):
        dicts.append(load_config_file(args.config))
    dicts.append(parse_overrides(getattr(args, "overrides", []) or []))
    for flag in getattr(args, "ablate", None) or []:
        dicts.append(parse_overrides([f"{flag}=true"]))
    if getattr(args, "seed", None) is not None:
        dicts.append({"seed": args.seed})
    return build_run_config(*dicts)


def _run_as_dict(run: RunConfig) -> dict:
    out: dict = {}
    for f in dataclasses.fields(RunConfig):
        val = getattr(run, f.name)
        out[f.name] = dataclasses.asdict(val) if dataclasses.is_dataclass(val) else val
    return out


def _echo_config(run: RunConfig, anchor) -> None:
    """Persist the resolved config next to an output file or inside a dir."""
    anchor = Path(anchor)
    target = anchor / "run.config" if anchor.is_dir() else \
        anchor.parent / (anchor.name + ".config")
    target.write_text(dump_run_config(run), encoding="utf-8")


def _report_dir(args, run: RunConfig, text: str) -> None:
    # print-only subcommands have no natural output path; --out-dir opts in
    out_dir = getattr(args, "out_dir", None)
    if not out_dir:
        return
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.txt").write_text(text, encoding="utf-8")
    _echo_config(run, out)


# ---------------------------------------------------------------------------
# subcommands


def _cmd_gen_data(args) -> int:
    run = _resolve_run(args)
    specs = default_benchmark_specs()
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    shard = generate_dataset(specs, args.episodes, run.seed, out, run.model,
                             instruction=args.instruction)
    _echo_config(run, out)
    sizes = sorted({s.d_a for s in shard.registry.specs})
    print(f"wrote {len(shard.episodes)} episodes to {out} "
          f"(embodiments d_a={sizes}, seed={run.seed})")
    return EXIT_OK


def _cmd_train(args) -> int:
    run = _resolve_run(args)
    data = args.data or run.data_path
    if not data:
        raise ValueError("no training data: pass --data or set data_path")
    out_dir = Path(args.out_dir or run.out_dir or "runs/default")
    shard = read_dataset(data)
    out_dir.mkdir(parents=True, exist_ok=True)
    _echo_config(run, out_dir)
    result = train_loop(shard, run, out_dir, resume=args.resume)
    if args.resume:
        # the checkpoint's config was authoritative; re-echo what actually ran
        _echo_config(result.policy.run, out_dir)
    last = result.metrics[-1]["loss"] if result.metrics else float("nan")
    print(f"trained {result.opt_state.step} steps; final loss {last:.6f}; "
          f"checkpoint {result.checkpoint_path}")
    return EXIT_OK


def _load_policy(args) -> Policy:
    policy, _, _ = Policy.from_checkpoint(args.checkpoint)
    return policy


def _cmd_eval(args) -> int:
    policy = _load_policy(args)
    overrides = parse_overrides(args.overrides or [])
    for flag in args.ablate or []:
        overrides.update(parse_overrides([f"{flag}=true"]))
    if overrides:
        # eval-time ablations zero rows at fixed shapes, so the checkpoint's
        # parameters stay valid; model/train shape keys must not change here
        run = build_run_config(
            _run_as_dict(policy.run), overrides,
            {"seed": args.seed} if args.seed is not None else {})
        policy = Policy(params=policy.params, run=run,
                        registry=policy.registry, stats=policy.stats)
    shard = read_dataset(args.data)
    episodes = list(shard.episodes)
    if args.max_episodes is not None:
        episodes = episodes[:args.max_episodes]
    if not episodes:
        raise ShardError(f"{args.data}: no episodes to evaluate")
    steps = args.steps if args.steps is not None else policy.run.sampler_steps
    report = evaluate_policy(policy, episodes, steps=steps)
    text = (f"success_rate {report.success_rate:.6f}\n"
            f"mae {report.mae:.6f}\n"
            f"episodes {len(episodes)}\n"
            f"sampler_steps {steps}\n")
    print(text, end="")
    _report_dir(args, policy.run, text)
    return EXIT_OK


def _cmd_rollout(args) -> int:
    policy = _load_policy(args)
    shard = read_dataset(args.data)
    if not 0 <= args.episode < len(shard.episodes):
        raise IndexError(
            f"episode {args.episode} out of range (shard has {len(shard.episodes)})")
    demo = shard.episodes[args.episode]
    spec = policy.registry.get(demo.embodiment_id)
    handle = policy.bind_observation(demo)
    seed = args.seed if args.seed is not None else policy.run.seed
    rng = np.random.Generator(np.random.Philox(key=[seed, EVAL_NOISE_STREAM]))
    steps = args.steps if args.steps is not None else policy.run.sampler_steps
    chunk = euler_sample(policy, handle, spec, steps, rng)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    lines = ["joint,function,rotation," +
             ",".join(f"t{k}" for k in range(chunk.values.shape[1]))]
    for j, joint in enumerate(spec.joints):
        vals = ",".join(repr(float(v)) for v in chunk.values[j])
        lines.append(f"{j},{FUNCTION_NAMES[joint.f]},{ROTATION_NAMES[joint.r]},{vals}")
    out.write_text("\n".join(lines) + "\n", encoding="utf-8")
    _echo_config(policy.run, out)
    print(f"wrote rollout for episode {args.episode} "
          f"(d_a={spec.d_a}, steps={steps}) to {out}")
    return EXIT_OK


def _cmd_grad_check(args) -> int:
    run = _resolve_run(args)
    records, passed = gradient_suite(seed=run.seed, tol=args.tol)
    lines = []
    for name, rep in records:
        lines.append(f"{name:22s} max_rel_err {rep.max_rel_err:.3e} "
                     f"{'ok' if rep.passed else 'FAIL'}")
    worst = max(rep.max_rel_err for _, rep in records)
    verdict = "PASS" if passed else "FAIL"
    lines.append(f"{verdict} max rel err {worst:.3e} (tol {args.tol:.1e})")
    text = "\n".join(lines) + "\n"
    print(text, end="")
    _report_dir(args, run, text)
    return EXIT_OK if passed else EXIT_NUMERIC


def _cmd_export_codebook(args) -> int:
    policy = _load_policy(args)
    params = policy.params
    if policy.cfg.temporal_centric or "code.table_e" not in params:
        raise CheckpointError(
            f"{args.checkpoint}: no codebook tables "
            "(temporal-centric checkpoints have none)")
    tables = CodebookTables(table_e=params["code.table_e"],
                            table_f=params["code.table_f"],
                            table_r=params["code.table_r"])
    text = export_codebook(tables, policy.registry)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(text, encoding="utf-8")
    _echo_config(policy.run, out)
    print(f"wrote codebook rows for {len(policy.registry.specs)} embodiments to {out}")
    return EXIT_OK


def _cmd_stats(args) -> int:
    shard = read_dataset(args.data)
    head = shard.header
    lines = [
        f"episodes {head['n_episodes']}",
        f"seed {head['seed']}",
        f"points_per_frame {head['n_points']}",
        f"history_frames {head['T_o']}",
        f"horizon {head['T']}",
        f"instruction {head['instruction']!r}",
        "",
        "episodes per embodiment:",
    ]
    per_emb: dict = {}
    for ep in shard.episodes:
        per_emb[ep.embodiment_id] = per_emb.get(ep.embodiment_id, 0) + 1
    for emb_id in sorted(per_emb):
        spec = shard.registry.get(emb_id)
        lines.append(f"  {spec.name} (id {emb_id}, d_a {spec.d_a}): {per_emb[emb_id]}")
    lines.append("")
    lines.append("joint identity frequency (weighted by episode):")
    specs = [shard.registry.get(ep.embodiment_id) for ep in shard.episodes]
    if specs:
        for row in frequency_csv(functional_frequency(specs)).splitlines():
            lines.append(f"  {row}")
    text = "\n".join(lines) + "\n"
    print(text, end="")
    if getattr(args, "out_dir", None):
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.txt").write_text(text, encoding="utf-8")
    return EXIT_OK


def _cmd_params(args) -> int:
    run = _resolve_run(args)
    rng = np.random.Generator(np.random.Philox(key=[run.seed, 0]))
    params = init_params(run.model, rng)
    lines = [f"total {count_params(params)}"]
    for group, n in sorted(param_breakdown(params).items()):
        lines.append(f"  {group} {n}")
    text = "\n".join(lines) + "\n"
    print(text, end="")
    _report_dir(args, run, text)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _add_config_args(sp, seed_help="override the run seed"):
    sp.add_argument("--config", help="key=value config file")
    sp.add_argument("--seed", type=int, help=seed_help)
    sp.add_argument("overrides", nargs="*", metavar="key=value",
                    help="config overrides (model.*, train.*, ablation flags, ...)")


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="sat",
        description="Flow-matching manipulation policy: data, training, "
                    "evaluation, diagnostics.")
    sub = p.add_subparsers(dest="cmd")

    sp = sub.add_parser("gen-data", help="write a synthetic demonstration shard")
    sp.add_argument("--out", required=True, help="output shard path")
    sp.add_argument("--episodes", type=int, default=2000)
    sp.add_argument("--instruction", default=DEFAULT_INSTRUCTION)
    _add_config_args(sp, "scene/expert sampling seed")
    sp.set_defaults(fn=_cmd_gen_data)

    sp = sub.add_parser("train", help="optimize the velocity field on a shard")
    sp.add_argument("--data", help="training shard (or data_path in config)")
    sp.add_argument("--out-dir", help="checkpoint/metrics directory")
    sp.add_argument("--resume", help="checkpoint to continue from")
    sp.add_argument("--ablate", action="append", metavar="FLAG",
                    help="train with an ablation active (repeatable)")
    _add_config_args(sp)
    sp.set_defaults(fn=_cmd_train)

    sp = sub.add_parser("eval", help="roll out a checkpoint and print success rate")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True, help="held-out shard")
    sp.add_argument("--steps", type=int, help="Euler steps (default: checkpoint's)")
    sp.add_argument("--max-episodes", type=int)
    sp.add_argument("--ablate", action="append", metavar="FLAG",
                    help="apply an ablation at eval time (repeatable)")
    sp.add_argument("--out-dir", help="persist report + resolved config here")
    sp.add_argument("--seed", type=int)
    sp.add_argument("overrides", nargs="*", metavar="key=value")
    sp.set_defaults(fn=_cmd_eval)

    sp = sub.add_parser("rollout", help="sample one action chunk and write CSV")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--episode", type=int, default=0)
    sp.add_argument("--steps", type=int)
    sp.add_argument("--out", required=True, help="output CSV path")
    sp.add_argument("--seed", type=int, help="sampling noise seed")
    sp.set_defaults(fn=_cmd_rollout)

    sp = sub.add_parser("grad-check", help="finite-difference audit of all ops")
    sp.add_argument("--tol", type=float, default=1e-4)
    sp.add_argument("--out-dir", help="persist report + resolved config here")
    _add_config_args(sp, "probe/subsample seed")
    sp.set_defaults(fn=_cmd_grad_check)

    sp = sub.add_parser("export-codebook",
                        help="write per-joint codebook embeddings as CSV")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=_cmd_export_codebook)

    sp = sub.add_parser("stats", help="print shard summary and joint histograms")
    sp.add_argument("--data", required=True)
    sp.add_argument("--out-dir")
    sp.set_defaults(fn=_cmd_stats)

    sp = sub.add_parser("params", help="print parameter count for a config")
    _add_config_args(sp)
    sp.set_defaults(fn=_cmd_params)

    return p


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        # argparse exits 2 on usage errors and 0 on --help; remap to contract
        return EXIT_OK if not e.code else EXIT_USAGE
    if getattr(args, "cmd", None) is None:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        return args.fn(args)
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, ShardError, CheckpointError, TrainingError,
            KeyError, IndexError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
