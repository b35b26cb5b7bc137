"""``eproxy`` command line: gen-bench, eval, rank, dps, nas, selfcheck, replay.

Machine-readable results go to stdout or ``--out``; progress and errors go to
stderr. Exit codes: 0 ok, 1 validation error, 2 divergence or cap reached.
Every run writes a manifest that ``eproxy replay`` can re-execute.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

from . import __version__
from .arch import SPACES, get_space
from .bench import TabularBench, TrainConfig, build_bench, build_toy_task
from .dps import AnchorSet, history_lines, run_dps
from .evolution import ReaParams
from .gradcheck import run_gradchecks
from .metrics import kendall_tau, spearman_rho, topk_retrieve_rate
from .nas import nas_search, random_search_baseline, summary_csv
from .proxy import ProxyConfig, evaluate_many, proxy_task, eproxy_evaluate
from .rng import Rng

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class CliError(Exception):
    """Validation failure; message goes to stderr and the exit code is 1."""


def _log(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


def _emit(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text if text.endswith("\n") else text + "\n")
    else:
        sys.stdout.write(text if text.endswith("\n") else text + "\n")


def _dump(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=True)


def load_config(value: str | None, seed: int, strict: bool = True) -> ProxyConfig:
    """``--config`` accepts a path or inline JSON. A config without ``seed``
    takes the run seed. ``strict=False`` admits off-grid lr/alpha (ablations)."""
    if value is None:
        return ProxyConfig(seed=seed)
    text = value if value.lstrip().startswith("{") else _read(value, "config")
    try:
        d = json.loads(text)
    except json.JSONDecodeError as e:
        raise CliError(f"config: invalid JSON at line {e.lineno} column {e.colno}: {e.msg}") from None
    if isinstance(d, dict) and "seed" not in d:
        d["seed"] = seed
    try:
        return ProxyConfig.from_dict(d, strict=strict)
    except (TypeError, ValueError) as e:
        raise CliError(f"config: {e}") from None


def _read(path: str, what: str) -> str:
    try:
        return Path(path).read_text()
    except OSError as e:
        raise CliError(f"{what}: cannot read {path}: {e.strerror}") from None


def load_bench(path: str) -> TabularBench:
    _read(path, "bench")
    try:
        bench = TabularBench.load(path)
        space = bench.space
    except (ValueError, KeyError, json.JSONDecodeError) as e:
        raise CliError(f"bench {path}: {e}") from None
    missing = {s.encode() for s in space.enumerate()} ^ set(bench.entries)
    if missing:
        raise CliError(f"bench {path}: entries do not match space {space.name!r} "
                       f"({len(missing)} mismatched arch strings)")
    return bench


def _decode(space, arch: str):
    try:
        return space.decode(arch)
    except ValueError as e:
        raise CliError(f"arch: {e}") from None


# --------------------------------------------------------------------------- commands


def cmd_gen_bench(args) -> tuple[int, list[str]]:
    space = get_space(args.space)
    task = build_toy_task(args.seed)
    if args.task_dir:
        task.save(args.task_dir)
    cfg = TrainConfig(epochs=args.epochs)
    start = time.perf_counter()

    def progress(i, n, res):
        _log(f"[{i}/{n}] {res[0]} acc={res[1].test_accuracy:.4f} ({time.perf_counter() - start:.0f}s)")

    bench = build_bench(space, task, args.seed, cfg, jobs=args.jobs, record_timing=args.record_timing,
                        progress=progress)
    _emit(bench.to_json(), args.out)
    outputs = [args.out] + ([args.task_dir] if args.task_dir else [])
    return (EXIT_RUNTIME if bench.meta["diverged"] else EXIT_OK), outputs


def cmd_eval(args) -> tuple[int, list[str]]:
    cfg = load_config(args.config, args.seed, not args.allow_off_grid)
    space = get_space(args.space)
    spec = _decode(space, args.arch)
    x, y = proxy_task(cfg, space)
    res = eproxy_evaluate(spec, cfg, x, y, space)
    d = res.to_dict()
    for k in ("final_loss", "adjusted_score"):
        d[k] = d[k] if not res.diverged else None
    _emit(_dump(d), args.out)
    return (EXIT_RUNTIME if res.diverged else EXIT_OK), [args.out] if args.out else []


def _oracle_scores(bench: TabularBench) -> dict[str, float]:
    return {a: -e["acc"] for a, e in bench.entries.items()}


def cmd_rank(args) -> tuple[int, list[str]]:
    bench = load_bench(args.bench)
    space = bench.space
    cfg = load_config(args.config, args.seed, not args.allow_off_grid)
    archs = sorted(bench.archs())
    if args.oracle_scorer:
        scores = _oracle_scores(bench)
        diverged = []
    else:
        x, y = proxy_task(cfg, space)
        results = evaluate_many([space.decode(a) for a in archs], cfg, x, y, space, args.jobs)
        scores = {r.arch: r.adjusted_score for r in results}
        diverged = sorted(r.arch for r in results if r.diverged)
    acc = [bench.accuracy(a) for a in archs]
    finite = [a for a in archs if scores[a] != float("inf")]
    worst = min(-scores[a] for a in finite) - 1.0 if finite else 0.0
    neg = [-scores[a] if a in finite else worst for a in archs]
    report = {"config": cfg.to_dict(), "n": len(archs), "diverged": diverged,
              "oracle_scorer": bool(args.oracle_scorer)}
    try:
        report.update(spearman_rho=spearman_rho(neg, acc), kendall_tau=kendall_tau(neg, acc),
                      top10_retrieve_rate=topk_retrieve_rate(neg, acc, 0.10))
    except ValueError as e:
        report.update(spearman_rho=None, kendall_tau=None, top10_retrieve_rate=None, error=str(e))
    _emit(_dump(report), args.out)
    outputs = [args.out] if args.out else []
    if args.scores_csv:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["arch", "score", "acc", "flops"])
        for a in sorted(archs, key=lambda a: (scores[a], a)):
            e = bench.query(a)
            w.writerow([a, repr(scores[a]), repr(e["acc"]), repr(e["flops"])])
        Path(args.scores_csv).write_text(buf.getvalue())
        outputs.append(args.scores_csv)
    code = EXIT_RUNTIME if diverged or report["spearman_rho"] is None else EXIT_OK
    return code, outputs


def cmd_dps(args) -> tuple[int, list[str]]:
    bench = load_bench(args.bench)
    space = bench.space
    if not 3 <= args.anchors < len(bench.entries):
        raise CliError(f"--anchors must be in [3, {len(bench.entries) - 1}]")
    params = ReaParams(cycles=args.cycles, population=args.population, sample=args.sample,
                       mutation_rate=args.mutation_rate)
    rng = Rng.from_key(args.seed, "dps")
    anchors = AnchorSet.from_bench(bench, rng.spawn("anchors"), args.anchors)
    base = ProxyConfig(seed=args.seed)
    x, _ = proxy_task(base, space)
    n_eval = [0]

    def progress(cycle, cfg, fit):
        n_eval[0] += 1
        _log(f"[{n_eval[0]}/{params.population + params.cycles}] cycle={cycle} fitness={fit:.4f}")

    best, hist = run_dps(anchors, params, rng.spawn("search"), x=x, base=base, space=space, jobs=args.jobs,
                         callback=progress)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "best_config.json").write_text(best.to_json() + "\n")
    (out / "history.jsonl").write_text("".join(line + "\n" for line in history_lines(hist, params.population)))

    held = anchors.held_out(bench)
    summary = {"anchors": [s.encode() for s in anchors.specs], "best_fitness": hist.best()[1],
               "best_config": best.to_dict(), "evaluations": len(hist)}
    if not args.skip_holdout:
        from .dps import dps_fitness
        summary["heldout_rho_best"] = dps_fitness(best, held, x, space=space, jobs=args.jobs)
        summary["heldout_rho_default"] = dps_fitness(base, held, x, space=space, jobs=args.jobs)
    (out / "summary.json").write_text(_dump(summary) + "\n")
    return EXIT_OK, [str(out / n) for n in ("best_config.json", "history.jsonl", "summary.json")]


def cmd_nas(args) -> tuple[int, list[str]]:
    bench = load_bench(args.bench)
    space = bench.space
    if args.budget < 1:
        raise CliError("--budget must be >= 1")
    if not 0 <= args.neighbor_budget < args.budget:
        raise CliError("--neighbor-budget must be in [0, budget)")
    params = ReaParams(cycles=args.cycles, population=args.population, sample=args.sample)
    runs = []
    for i in range(args.runs):
        seed = args.seed + i
        cfg = load_config(args.config, seed, not args.allow_off_grid)
        scorer = None
        if args.oracle_scorer:
            scores = _oracle_scores(bench)
            scorer = lambda spec: scores[spec.encode()]  # noqa: E731
        run = nas_search(space, cfg, bench, args.budget, Rng.from_key(seed, "nas"), params, scorer=scorer,
                         neighbor_budget=args.neighbor_budget, seed=seed)
        _log(f"seed {seed}: best {run.best_arch} acc={run.best_acc:.4f} rank={run.rank_of_best}")
        runs.append(run)
    doc = {"runs": [r.to_dict() for r in runs]}
    if args.baseline_trials:
        rng = Rng.from_key(args.seed, "random-baseline")
        vals = [random_search_baseline(space, bench, args.budget, rng) for _ in range(args.baseline_trials)]
        doc["random_baseline"] = {"trials": args.baseline_trials, "mean_best_acc": sum(vals) / len(vals)}
    _emit(_dump(doc), args.out)
    outputs = [args.out] if args.out else []
    if args.csv:
        Path(args.csv).write_text(summary_csv(runs))
        outputs.append(args.csv)
    return EXIT_OK, outputs


def cmd_selfcheck(args) -> tuple[int, list[str]]:
    from .selfcheck import metric_oracle_checks

    grads = run_gradchecks(args.seed)
    metrics = metric_oracle_checks(args.seed)
    report = {
        "gradcheck": {"cases": len(grads), "failed": [f"{r.name}#{r.seed}" for r in grads if not r.ok],
                      "max_rel_error": max(r.rel_error for r in grads)},
        "metrics": metrics,
    }
    ok = not report["gradcheck"]["failed"] and metrics["ok"]
    report["ok"] = ok
    _emit(_dump(report), args.out)
    return (EXIT_OK if ok else EXIT_INVALID), [args.out] if args.out else []


COMMANDS = {
    "gen-bench": cmd_gen_bench,
    "eval": cmd_eval,
    "rank": cmd_rank,
    "dps": cmd_dps,
    "nas": cmd_nas,
    "selfcheck": cmd_selfcheck,
}


# --------------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="eproxy", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"eproxy {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_help="write the result here instead of stdout"):
        sp.add_argument("--seed", type=int, default=None, help="global seed (falls back to $EPXY_SEED)")
        sp.add_argument("--out", default=None, help=out_help)
        sp.add_argument("--manifest", default=None,
                        help="manifest path (default: <out>.manifest.json or eproxy-<command>.manifest.json)")
        return sp

    def off_grid(sp):
        sp.add_argument("--allow-off-grid", action="store_true",
                        help="accept lr/alpha values outside the search grid (ablations)")

    g = common(sub.add_parser("gen-bench", help="train every architecture of a space on the toy task"))
    g.add_argument("--space", default="mini", choices=sorted(SPACES))
    g.add_argument("--epochs", type=int, default=30)
    g.add_argument("--jobs", type=int, default=1)
    g.add_argument("--task-dir", default=None, help="also persist the toy task (.epb + labels)")
    g.add_argument("--record-timing", action="store_true",
                   help="store wall-clock training seconds (makes the file non-reproducible)")

    e = common(sub.add_parser("eval", help="score one architecture"))
    e.add_argument("--arch", required=True)
    e.add_argument("--config", default=None, help="ProxyConfig JSON file or inline JSON")
    e.add_argument("--space", default="mini", choices=sorted(SPACES))
    off_grid(e)

    r = common(sub.add_parser("rank", help="score a whole bench and report rank correlation"))
    r.add_argument("--bench", required=True)
    r.add_argument("--config", default=None)
    r.add_argument("--jobs", type=int, default=1)
    r.add_argument("--scores-csv", default=None, help="per-architecture scores")
    r.add_argument("--oracle-scorer", action="store_true", help="score = -true accuracy (pipeline check)")
    off_grid(r)

    d = common(sub.add_parser("dps", help="discrete proxy search"), out_help="output directory")
    d.add_argument("--bench", required=True)
    d.add_argument("--anchors", type=int, default=20)
    d.add_argument("--cycles", type=int, default=200)
    d.add_argument("--population", type=int, default=40)
    d.add_argument("--sample", type=int, default=10)
    d.add_argument("--mutation-rate", type=float, default=0.2)
    d.add_argument("--jobs", type=int, default=1)
    d.add_argument("--skip-holdout", action="store_true", help="do not score the held-out architectures")

    n = common(sub.add_parser("nas", help="proxy-guided search with a query budget"))
    n.add_argument("--bench", required=True)
    n.add_argument("--config", default=None)
    n.add_argument("--budget", type=int, default=10)
    n.add_argument("--neighbor-budget", type=int, default=0)
    n.add_argument("--cycles", type=int, default=500)
    n.add_argument("--population", type=int, default=40)
    n.add_argument("--sample", type=int, default=10)
    n.add_argument("--runs", type=int, default=1, help="repeat with seeds seed, seed+1, ...")
    n.add_argument("--csv", default=None, help="summary CSV, one row per run")
    n.add_argument("--baseline-trials", type=int, default=0, help="random-search trials to report alongside")
    n.add_argument("--oracle-scorer", action="store_true", help="score = -true accuracy (pipeline check)")
    off_grid(n)

    common(sub.add_parser("selfcheck", help="gradient checks and metric oracles"))

    rp = sub.add_parser("replay", help="re-run the command recorded in a manifest")
    rp.add_argument("manifest")
    return p


def _resolve_seed(args) -> int:
    if args.seed is not None:
        return args.seed
    env = os.environ.get("EPXY_SEED")
    if env is None:
        raise CliError("--seed is required (or set EPXY_SEED)")
    try:
        return int(env)
    except ValueError:
        raise CliError(f"EPXY_SEED must be an integer, got {env!r}") from None


def _check_jobs(args) -> None:
    if getattr(args, "jobs", 1) < 1:
        raise CliError("--jobs must be >= 1")


def _manifest_path(args) -> Path:
    if args.manifest:
        return Path(args.manifest)
    if args.out:
        return Path(str(args.out).rstrip("/") + ".manifest.json")
    return Path(f"eproxy-{args.command}.manifest.json")


def _run(args) -> int:
    args.seed = _resolve_seed(args)
    _check_jobs(args)
    config = {k: v for k, v in vars(args).items() if k not in ("manifest",)}
    started = datetime.now(timezone.utc)
    t0 = time.perf_counter()
    code, outputs = COMMANDS[args.command](args)
    manifest = {
        "command": args.command,
        "config": config,
        "seed": args.seed,
        "version": __version__,
        "outputs": outputs,
        "exit_code": code,
        "started_utc": started.isoformat(timespec="seconds"),
        "wall_clock_seconds": round(time.perf_counter() - t0, 3),
    }
    _manifest_path(args).write_text(_dump(manifest) + "\n")
    return code


def _replay(path: str) -> int:
    try:
        m = json.loads(_read(path, "manifest"))
        cfg = dict(m["config"])
        command = m["command"]
    except (json.JSONDecodeError, KeyError, TypeError) as e:
        raise CliError(f"manifest {path}: {e}") from None
    if command not in COMMANDS:
        raise CliError(f"manifest {path}: unknown command {command!r}")
    defaults = vars(build_parser().parse_args([command] + _required_stub(command)))
    unknown = sorted(set(cfg) - set(defaults))
    if unknown:
        raise CliError(f"manifest {path}: unknown config keys {unknown}")
    merged = {**defaults, **cfg, "manifest": None}
    return _run(argparse.Namespace(**merged))


def _required_stub(command: str) -> list[str]:
    # placeholders for required options, overwritten by the manifest
    return {"eval": ["--arch", "x"], "rank": ["--bench", "x"], "dps": ["--bench", "x"],
            "nas": ["--bench", "x"]}.get(command, [])


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "replay":
            return _replay(args.manifest)
        return _run(args)
    except CliError as e:
        _log(f"error: {e}")
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
