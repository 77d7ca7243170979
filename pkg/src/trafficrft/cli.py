"""Command-line interface: ``trafficrft <command> [flags]``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
Errors are reported as one line on stderr: ``error[<code>]: <message>``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import torch

from .pipeline import load_run_config, run_pipeline
from .policy_model import ModelError, load_checkpoint
from .realism_metrics import MetricReport, report_csv, report_json
from .render import RenderError, save_svg
from .rollout import ConfigurationError, SamplingSpec, batch_rollouts, check_vocab, read_rollouts, write_rollouts
from .scenario import MAX_AGENTS, TEMPLATES, ScenarioError, default_workers, generate_dataset, load_dataset, load_scenario
from .tokenizer import build_vocab, load_vocab, save_vocab
from .training import Runner, evaluate, split_indices

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4


class DataError(Exception):
    pass


def _agents(text: str):
    try:
        if ":" in text:
            lo, hi = (int(v) for v in text.split(":"))
            return lo, hi
        return int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected N or LO:HI, got {text!r}") from None


def _scenarios(path) -> list:
    p = Path(path)
    if p.is_dir():
        out = load_dataset(p)
    elif p.is_file():
        out = [load_scenario(p)]
    else:
        raise DataError(f"{p}: no such file or directory")
    if not out:
        raise DataError(f"{p}: no scenario files")
    return out


# --------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> None:
    rng_agents = args.agents if isinstance(args.agents, tuple) else (args.agents, args.agents)
    lo, hi = rng_agents
    if not (1 <= lo <= hi <= MAX_AGENTS):
        raise ValueError(f"agents out of range: must lie in [1, {MAX_AGENTS}], got {lo}..{hi}")
    if args.count < 0:
        raise ValueError("count must be >= 0")
    tpl = None if args.template == "mixed" else args.template
    paths = generate_dataset(args.out_dir, args.count, args.seed, tpl, args.agents)
    print(f"wrote {len(paths)} scenarios to {args.out_dir}")


def cmd_build_vocab(args) -> None:
    scs = _scenarios(args.data)
    vocab = build_vocab(scs, eps=args.eps, max_size=args.max_size, seed=args.seed, heading_weight=args.heading_weight)
    save_vocab(vocab, args.out)
    sizes = ", ".join(f"{k}={len(v)}" for k, v in vocab.templates.items())
    print(f"vocabulary {vocab.content_hash[:12]} ({sizes}) -> {args.out}")


def _run(args, evaluate_stages: bool) -> None:
    cfg = load_run_config(args.config)
    if not evaluate_stages:
        cfg.sweeps = []
    with Runner(args.workers) as runner:
        res = run_pipeline(cfg, args.run_dir, resume=args.resume, runner=runner, evaluate_stages=evaluate_stages)
    print(f"stages {res.checkpoint.stage_history} -> {args.run_dir}")


def cmd_train(args) -> None:
    _run(args, evaluate_stages=False)


def cmd_pipeline(args) -> None:
    _run(args, evaluate_stages=True)


def _load_ck_vocab(args):
    ck = load_checkpoint(args.checkpoint)
    vocab = load_vocab(args.vocab)
    check_vocab(ck, vocab)
    return ck, vocab


def cmd_rollout(args) -> None:
    ck, vocab = _load_ck_vocab(args)
    scs = _scenarios(args.data)
    sampling = SamplingSpec(args.temperature, args.top_k, args.greedy, args.seed)
    batches = [batch_rollouts(ck, sc, vocab, sampling, args.rollouts) for sc in scs]
    write_rollouts(batches, args.out)
    print(f"wrote {sum(b.n_rollouts for b in batches)} rollouts to {args.out}")


def cmd_evaluate(args) -> None:
    ck, vocab = _load_ck_vocab(args)
    scs = _scenarios(args.data)
    split_indices(len(scs), args.split_fraction, args.split_seed)  # validates before any work
    sampling = SamplingSpec(args.temperature, args.top_k, False, args.seed)
    with Runner(args.workers) as runner:
        agg, reports = evaluate(ck, scs, vocab, args.rollouts, sampling, args.split_fraction, args.split_seed, runner)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.csv").write_text(report_csv(reports), encoding="utf-8")
    (out / "metrics.json").write_text(report_json(reports), encoding="utf-8")
    print(f"{len(reports)} scenarios: Realism Meta {agg.realism_meta:.4f}, minADE {agg.min_ade:.3f} m -> {out}")


def cmd_render(args) -> None:
    sc = load_scenario(args.scenario)
    recs = read_rollouts(args.rollout_file) if args.rollout_file else None
    save_svg(args.out, sc, recs, step=args.step, ego=args.ego, max_rollouts=args.max_rollouts)
    print(f"wrote {args.out}")


def cmd_report(args) -> None:
    rows = []
    for p in args.inputs:
        d = json.loads(Path(p).read_text(encoding="utf-8"))
        a = d.get("aggregate")
        if a is None:
            raise DataError(f"{p}: not a metrics report (no 'aggregate' key)")
        rep = MetricReport(Path(p).name.removesuffix(".json"), a["sub_scores"], a["realism_meta"], a["min_ade"], a["n_scenarios"])
        rows.append(rep)
    if args.format == "json":
        text = json.dumps([r.to_dict() for r in rows], indent=2, sort_keys=True) + "\n"
    else:
        text = report_csv(rows, include_mean=False)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="trafficrft", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="progress logging on stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write synthetic scenario files")
    g.add_argument("--template", choices=[*TEMPLATES, "mixed"], default="mixed")
    g.add_argument("--count", type=int, default=16)
    g.add_argument("--agents", type=_agents, default=(4, 8), help="N or LO:HI agents per scene")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out-dir", required=True)
    g.set_defaults(func=cmd_gen_data)

    v = sub.add_parser("build-vocab", help="cluster motion tokens from a dataset")
    v.add_argument("--data", required=True)
    v.add_argument("--eps", type=float, default=0.5)
    v.add_argument("--max-size", type=int, default=128)
    v.add_argument("--heading-weight", type=float, default=1.0)
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--out", required=True)
    v.set_defaults(func=cmd_build_vocab)

    for name, fn, text in (
        ("train", cmd_train, "run the configured stages"),
        ("pipeline", cmd_pipeline, "run the stages with evaluation, stage table and sweeps"),
    ):
        t = sub.add_parser(name, help=text)
        t.add_argument("--config", required=True)
        t.add_argument("--run-dir", required=True)
        t.add_argument("--resume", help="checkpoint of a finished stage of this run")
        t.add_argument("--workers", type=int, default=default_workers())
        t.set_defaults(func=fn)

    def model_flags(q):
        q.add_argument("--checkpoint", required=True)
        q.add_argument("--vocab", required=True)
        q.add_argument("--data", required=True, help="scenario file or directory")
        q.add_argument("--seed", type=int, default=0)
        q.add_argument("--temperature", type=float, default=1.0)
        q.add_argument("--top-k", type=int)

    r = sub.add_parser("rollout", help="export sampled rollouts as JSON lines")
    model_flags(r)
    r.add_argument("--rollouts", type=int, default=32)
    r.add_argument("--greedy", action="store_true")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_rollout)

    e = sub.add_parser("evaluate", help="Realism Meta and minADE of a checkpoint")
    model_flags(e)
    e.add_argument("--rollouts", type=int, default=32)
    e.add_argument("--split-fraction", type=float, default=1.0)
    e.add_argument("--split-seed", type=int, default=0)
    e.add_argument("--workers", type=int, default=default_workers())
    e.add_argument("--out-dir", required=True)
    e.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("render", help="static SVG of a scene and its rollouts")
    s.add_argument("--scenario", required=True)
    s.add_argument("--rollout-file")
    s.add_argument("--out", required=True)
    s.add_argument("--step", type=int, default=90)
    s.add_argument("--ego", type=int)
    s.add_argument("--max-rollouts", type=int, default=4)
    s.set_defaults(func=cmd_render)

    m = sub.add_parser("report", help="combine metric reports into one table")
    m.add_argument("inputs", nargs="+", help="metrics JSON files")
    m.add_argument("--format", choices=["csv", "json"], default="csv")
    m.add_argument("--out")
    m.set_defaults(func=cmd_report)
    return p


def _fail(code: int, msg: str) -> int:
    print(f"error[{code}]: {' '.join(str(msg).split())}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    # single-threaded kernels keep every output independent of the machine and of --workers
    torch.set_num_threads(1)
    if getattr(args, "workers", 1) < 1:
        return _fail(EXIT_CONFIG, "--workers must be >= 1")
    try:
        args.func(args)
    except FloatingPointError as e:
        return _fail(EXIT_NUMERIC, f"numeric failure: {e}")
    except (ScenarioError, RenderError, DataError, json.JSONDecodeError) as e:
        return _fail(EXIT_DATA, e)
    except (ConfigurationError, ModelError) as e:
        return _fail(EXIT_CONFIG, e)
    except OSError as e:
        return _fail(EXIT_DATA, f"I/O error: {e}")
    except (ValueError, KeyError) as e:
        return _fail(EXIT_CONFIG, e)
    return 0


if __name__ == "__main__":
    sys.exit(main())
