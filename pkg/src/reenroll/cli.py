"""Command-line entry point: analyze, simulate, oracle, validate.

Exit codes: 0 success, 2 invalid input or configuration, 3 estimation failure.
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import hashlib
import io
import json
import math
import os
import sys
from dataclasses import dataclass
from pathlib import Path

from . import __version__
from .errors import ConfigError, EstimationError, ParseError, ReenrollError, SchemeError, ValidationError
from .estimators import ECE_METHODS, SUBSTUDY_METHODS
from .inference import analyze, noninferiority_test, report_dict
from .scheme import check_coverage, load_scheme
from .simgen import DEFAULT_METHODS, SimConfig, TruthTable, check_methods, run_replications, truth_oracle
from .trial_data import apply_missingness_policy, load_records

WORKERS_ENV = "REENROLL_WORKERS"
EXIT_INPUT, EXIT_ESTIMATION = 2, 3


@dataclass
class AnalyzeRequest:
    data: str
    schema: str
    scheme: str
    comparisons: list[tuple[str, str]]
    methods: list[str]
    episodes: tuple[int, ...] | None = None
    covariates: tuple[str, ...] = ()
    intercept_only: bool = False
    pooling: str = "per-episode"
    level: float = 0.95
    margin: float | None = None
    missing: str = "complete-case-record"

    def check(self):
        bad = [m for m in self.methods if m not in ECE_METHODS + SUBSTUDY_METHODS]
        if bad:
            raise ConfigError(f"unknown methods {bad}")
        adjusted = [m for m in self.methods if m in ("aipw", "aps")]
        if adjusted and not self.covariates and not self.intercept_only:
            raise ConfigError(f"{adjusted} need --covariates or --intercept-only")
        if not 0 < self.level < 1:
            raise ConfigError("--level must lie in (0, 1)")
        if self.margin is not None and not math.isfinite(self.margin):
            raise ConfigError("--margin must be finite")


def _digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _now():
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


class Manifest:
    """Run manifest, written on success and on failure."""

    def __init__(self, command, config, inputs=(), seed=None):
        self.data = {
            "tool": "reenroll",
            "version": __version__,
            "command": command,
            "config": config,
            "inputs": {str(p): _digest(p) for p in inputs if p and Path(p).is_file()},
            "seed": seed,
            "started": _now(),
        }

    def write(self, outdir, status, error=None):
        self.data.update(finished=_now(), exit_code=status, error=error)
        Path(outdir).mkdir(parents=True, exist_ok=True)
        with open(Path(outdir) / "manifest.json", "w") as fh:
            json.dump(self.data, fh, indent=2, sort_keys=False)
            fh.write("\n")


def _split(value):
    return [v.strip() for v in value.split(",") if v.strip()] if value else []


def _comparisons(value):
    out = []
    for item in _split(value):
        for sep in ("v", ":"):
            if sep in item:
                j, k = item.split(sep, 1)
                out.append((j.strip(), k.strip()))
                break
        else:
            raise ConfigError(f"comparison {item!r} must look like 2v1")
    return out


def _episodes(value):
    if value in (None, "", "all"):
        return None
    try:
        return tuple(int(t) for t in _split(value))
    except ValueError:
        raise ConfigError(f"--episodes must be 'all' or a list of integers, got {value!r}") from None


def _workers(value):
    if value is None:
        value = os.environ.get(WORKERS_ENV, "1")
    try:
        w = int(value)
    except ValueError:
        raise ConfigError(f"worker count must be an integer, got {value!r}") from None
    if w < 1:
        raise ConfigError("worker count must be >= 1")
    return w


def _emit(text, fmt_path=None):
    sys.stdout.write(text)
    if fmt_path is not None:
        Path(fmt_path).write_text(text)


# ---------------------------------------------------------------------------
# analyze / validate


def _load_inputs(req):
    rs = load_records(req.data, req.schema)
    scheme = load_scheme(req.scheme)
    errors = check_coverage(scheme, rs)
    if errors:
        raise SchemeError("; ".join(f"{loc}: {msg}" for loc, msg in errors[:10])
                          + (f"; ... ({len(errors) - 10} more)" if len(errors) > 10 else ""))
    return rs, scheme


def _substudy_for(rs, j, k):
    if rs.substudy is None:
        raise ValidationError([("substudy", "substudy methods need a substudy column")])
    arms = {}
    for s, a in zip(rs.substudy.tolist(), rs.arm.tolist()):
        arms.setdefault(s, set()).add(a)
    hits = sorted(s for s, a in arms.items() if s is not None and a == {j, k})
    if len(hits) != 1:
        raise ValidationError([("substudy", f"no unique substudy randomising exactly arms {j} and {k}")])
    return hits[0]


def run_analysis(req: AnalyzeRequest, rs=None, scheme=None):
    """Report entries for every comparison x method (library-level; used by the CLI)."""
    req.check()
    if rs is None:
        rs, scheme = _load_inputs(req)
    rs, report = apply_missingness_policy(rs, req.missing)
    entries = []
    for j, k in req.comparisons:
        for method in req.methods:
            sub = _substudy_for(rs, j, k) if method in SUBSTUDY_METHODS else None
            cov = req.covariates if method in ("aipw", "aps", "ancova", "anhecova") else ()
            est, _, var = analyze(method, rs, scheme, j, k, episodes=req.episodes, covariates=cov,
                                  pooling=req.pooling, level=req.level, substudy=sub)
            ni = noninferiority_test(est, var, req.margin, req.level) if req.margin is not None else None
            entries.append(report_dict(rs, est, var, ni))
    return entries, report


def _analysis_text(entries):
    head = f"{'method':<10}{'comparison':<12}{'estimate':>10}{'SE':>9}{'CI':>24}{'n':>7}{'n_pe':>7}  NI"
    lines = [head, "-" * len(head)]
    for e in entries:
        ci = f"[{e['ci'][0]:.3f}, {e['ci'][1]:.3f}]"
        ni = e.get("noninferiority")
        flag = "" if ni is None else ("yes" if ni["noninferior"] else "no")
        lines.append(f"{e['method']:<10}{e['comparison']:<12}{e['estimate']:>10.3f}{e['se']:>9.3f}{ci:>24}"
                     f"{e['n_participants']:>7d}{e['n_person_episodes']:>7d}  {flag}")
    return "\n".join(lines) + "\n"


def _analysis_csv(entries):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "comparison", "estimate", "se", "ci_lower", "ci_upper", "level",
                "n_participants", "n_person_episodes", "noninferior"])
    for e in entries:
        ni = e.get("noninferiority")
        w.writerow([e["method"], e["comparison"], repr(e["estimate"]), repr(e["se"]), repr(e["ci"][0]),
                    repr(e["ci"][1]), e["level"], e["n_participants"], e["n_person_episodes"],
                    "" if ni is None else str(ni["noninferior"]).lower()])
    return buf.getvalue()


def cmd_analyze(args) -> int:
    manifest = Manifest("analyze", vars_clean(args), [args.data, args.schema, args.scheme])
    try:
        req = AnalyzeRequest(
            data=args.data, schema=args.schema, scheme=args.scheme,
            comparisons=_comparisons(args.comparisons), methods=_split(args.methods),
            episodes=_episodes(args.episodes), covariates=tuple(_split(args.covariates)),
            intercept_only=args.intercept_only, pooling=args.pooling, level=args.level,
            margin=args.margin, missing=args.missing)
        entries, report = run_analysis(req)
    except (ParseError, ValidationError, SchemeError, ConfigError, OSError) as exc:
        return _fail(manifest, args.outdir, EXIT_INPUT, exc)
    except EstimationError as exc:
        return _fail(manifest, args.outdir, EXIT_ESTIMATION, exc)
    out = Path(args.outdir)
    out.mkdir(parents=True, exist_ok=True)
    doc = {"reports": entries, "dropped_records": report.dropped_count}
    (out / "report.json").write_text(json.dumps(doc, indent=2) + "\n")
    text = _analysis_text(entries)
    (out / "report.txt").write_text(text)
    manifest.write(out, 0)
    _emit({"json": json.dumps(doc, indent=2) + "\n", "csv": _analysis_csv(entries), "text": text}[args.format])
    return 0


def cmd_validate(args) -> int:
    try:
        rs = load_records(args.data, args.schema)
        scheme = load_scheme(args.scheme)
        errors = check_coverage(scheme, rs)
    except (ParseError, ValidationError, SchemeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    if errors:
        for loc, msg in errors:
            print(f"error: {loc}: {msg}", file=sys.stderr)
        return EXIT_INPUT
    print(f"ok: {len(rs)} records, {rs.n} participants, episodes 1..{rs.max_episode}")
    return 0


def _fail(manifest, outdir, code, exc):
    print(f"error: {exc}", file=sys.stderr)
    try:
        manifest.write(outdir, code, str(exc))
    except OSError:
        pass
    return code


def vars_clean(args):
    return {k: v for k, v in vars(args).items() if k != "func"}


# ---------------------------------------------------------------------------
# simulate / oracle


def _sim_config(args) -> SimConfig:
    base = {}
    if args.config:
        with open(args.config) as fh:
            try:
                base = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"config JSON: {exc}") from None
    cfg = SimConfig.from_dict(base)
    over = {"n": args.n, "scenario": args.scenario, "seed": args.seed, "log_scale": args.log_scale,
            "truncation_method": args.truncation_method}
    if getattr(args, "reps", None) is not None:
        over["reps"] = args.reps
    if getattr(args, "comparisons", None):
        over["comparisons"] = tuple(_comparisons(args.comparisons))
    try:
        return SimConfig.from_dict({**cfg.to_dict(), **{k: v for k, v in over.items() if v is not None}})
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def _oracle_draws(value):
    if value is None:
        return None
    text = value.split("=", 1)[1] if "=" in value else value
    try:
        return int(float(text))
    except ValueError:
        raise ConfigError(f"--truth-from-oracle expects draws=N, got {value!r}") from None


def cmd_simulate(args) -> int:
    manifest = Manifest("simulate", vars_clean(args), [args.config, args.truth_file])
    try:
        cfg = _sim_config(args)
        manifest.data["config"] = {"simulation": cfg.to_dict(), "arguments": vars_clean(args)}
        manifest.data["seed"] = cfg.seed
        workers = _workers(args.workers)
        methods = _split(args.methods) or list(DEFAULT_METHODS)
        check_methods(methods)
        if args.truth_file:
            with open(args.truth_file) as fh:
                truth = TruthTable.from_dict(json.load(fh))
        else:
            draws = _oracle_draws(args.truth_from_oracle) or 10**7
            truth = truth_oracle(cfg, draws, workers=workers)
        summary = run_replications(cfg, methods, cfg.comparisons, truth, workers=workers)
    except (ConfigError, ParseError, OSError, json.JSONDecodeError) as exc:
        return _fail(manifest, args.outdir, EXIT_INPUT, exc)
    except ReenrollError as exc:
        return _fail(manifest, args.outdir, EXIT_ESTIMATION, exc)
    out = Path(args.outdir)
    out.mkdir(parents=True, exist_ok=True)
    csv_text = summary.to_csv()
    (out / "summary.csv").write_text(csv_text)
    (out / "summary.txt").write_text(summary.to_text())
    (out / "truth.json").write_text(json.dumps(truth.to_dict(), indent=2) + "\n")
    if args.dump_replications:
        (out / "replications.csv").write_text(summary.replications_csv())
    manifest.write(out, 0)
    _emit({"csv": csv_text, "text": summary.to_text(),
           "json": json.dumps([c.__dict__ for c in summary.cells], indent=2) + "\n"}[args.format])
    return 0


def cmd_oracle(args) -> int:
    manifest = Manifest("oracle", vars_clean(args), [args.config])
    try:
        cfg = _sim_config(args)
        manifest.data["seed"] = cfg.seed
        truth = truth_oracle(cfg, args.draws, workers=_workers(args.workers))
    except (ConfigError, OSError) as exc:
        return _fail(manifest, args.outdir, EXIT_INPUT, exc)
    out = Path(args.outdir)
    out.mkdir(parents=True, exist_ok=True)
    doc = json.dumps(truth.to_dict(), indent=2) + "\n"
    (out / "truth.json").write_text(doc)
    manifest.write(out, 0)
    if args.format == "json":
        _emit(doc)
    else:
        rows = [(c, s, v, truth.se[(c, s)]) for (c, s), v in truth.values.items()]
        if args.format == "csv":
            _emit("comparison,scope,truth,mc_se\n" + "".join(f"{c},{s},{v!r},{e!r}\n" for c, s, v, e in rows))
        else:
            _emit("".join(f"{c:<6}{s:<10}{v:>10.4f}  (MC SE {e:.5f})\n" for c, s, v, e in rows))
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="reenroll", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"reenroll {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def data_args(sp):
        sp.add_argument("--data", required=True, help="episode-level CSV")
        sp.add_argument("--schema", required=True, help="column schema JSON")
        sp.add_argument("--scheme", required=True, help="assignment scheme JSON")

    a = sub.add_parser("analyze", help="estimate contrasts on a dataset")
    data_args(a)
    a.add_argument("--comparisons", required=True, help="e.g. 2v1,3v1")
    a.add_argument("--methods", default=",".join(ECE_METHODS))
    a.add_argument("--episodes", default="all", help="'all' or a list such as 1")
    a.add_argument("--covariates", default="", help="working-model covariates, comma separated")
    a.add_argument("--intercept-only", action="store_true", help="allow aipw/aps without covariates")
    a.add_argument("--pooling", choices=("per-episode", "pooled"), default="per-episode")
    a.add_argument("--level", type=float, default=0.95)
    a.add_argument("--margin", type=float, default=None, help="non-inferiority margin")
    a.add_argument("--missing", choices=("complete-case-record", "fail"), default="complete-case-record")
    a.add_argument("--outdir", default=".")
    a.add_argument("--format", choices=("json", "csv", "text"), default="text")
    a.set_defaults(func=cmd_analyze)

    v = sub.add_parser("validate", help="check data against schema and scheme")
    data_args(v)
    v.set_defaults(func=cmd_validate)

    def sim_args(sp):
        sp.add_argument("--config", help="JSON file mirroring SimConfig")
        sp.add_argument("--n", type=int)
        sp.add_argument("--scenario", type=int, choices=(1, 2))
        sp.add_argument("--seed", type=int)
        sp.add_argument("--log-scale", choices=("sd", "variance"))
        sp.add_argument("--truncation-method", choices=("reject", "clamp"))
        sp.add_argument("--workers", help=f"worker processes (default ${WORKERS_ENV} or 1)")
        sp.add_argument("--outdir", default=".")

    s = sub.add_parser("simulate", help="Monte Carlo replication study")
    sim_args(s)
    s.add_argument("--reps", type=int)
    s.add_argument("--methods", default="", help="default: all proposed, episode-1-only and substudy methods")
    s.add_argument("--comparisons", default="")
    g = s.add_mutually_exclusive_group()
    g.add_argument("--truth-from-oracle", metavar="draws=N")
    g.add_argument("--truth-file")
    s.add_argument("--dump-replications", action="store_true")
    s.add_argument("--format", choices=("json", "csv", "text"), default="text")
    s.set_defaults(func=cmd_simulate)

    o = sub.add_parser("oracle", help="ground-truth contrasts by Monte Carlo integration")
    sim_args(o)
    o.add_argument("--draws", type=lambda x: int(float(x)), default=10**7)
    o.add_argument("--format", choices=("json", "csv", "text"), default="text")
    o.set_defaults(func=cmd_oracle)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
