"""Command-line front end: ``icl-gd {gen,train,eta,lemmas,verify,report}``.

Settings resolve as command-line flag, then config file, then default. The
config file is JSON with optional top-level ``seed``, ``output_dir``,
``workers``, ``suite``, ``count`` and sections ``task``, ``train`` and ``mc``.
Unknown keys are rejected.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from . import __version__
from .estimators import estimate_eta
from .io import canonical_json, write_atomic
from .numerics import RngStream, sample_spd
from .tasks import ACTIVATIONS, MlpTargetSpec, TaskSpec, batch_to_json, sample_batch
from .training import TrainConfig, TrainingDivergedError, train
from .verify import SUITES, SuiteConfig, SuiteResult, run_suite, write_suite_result

COMMANDS = ("gen", "train", "eta", "lemmas", "verify", "report")
OUTPUT_DIR_ENV = "ICL_GD_OUTPUT_DIR"
EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2

CSV_HELP = "The loss CSV has columns: step, loss (batch loss at that step), grad_norm (L2 norm of the batch gradient)."


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TaskConfig:
    """Task settings; ``eig_min``/``eig_max`` bound the random covariance of skewed tasks."""

    kind: str = "isotropic"
    d: int = 5
    n: int = 20
    sigma: float = 0.5
    eig_min: float = 0.25
    eig_max: float = 4.0
    hidden: tuple[int, ...] = (16,)
    activation: str = "tanh"
    output_scale: float = 1.0


@dataclass(frozen=True)
class McConfig:
    samples: int = 100_000
    probes: int = 8
    eta_samples: int = 200_000
    isotropy_samples: int = 1_000_000
    eval_count: int = 10_000


@dataclass(frozen=True)
class CliConfig:
    command: str
    task: TaskConfig = field(default_factory=TaskConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    mc: McConfig = field(default_factory=McConfig)
    output_dir: str = "results"
    seed: int = 0
    workers: int = 1
    suite: tuple[str, ...] = ()
    count: int = 1000

    def resolved(self) -> dict:
        """Everything that determines a result (not output location or worker count)."""
        out = asdict(self)
        out.pop("output_dir")
        out.pop("workers")
        out["train"].pop("seed")
        return out


_CHOICES = {
    "kind": ("isotropic", "skewed", "nonlinear"),
    "activation": tuple(ACTIVATIONS),
    "optimizer": ("adam", "plain-gd"),
    "parameterization": ("full", "reduced"),
    "schedule": ("constant", "cosine"),
}
_MINIMUM = {
    "d": 1,
    "n": 1,
    "sigma": 0,
    "output_scale": 0,
    "step_size": 0,
    "steps": 1,
    "batch_size": 1,
    "log_every": 1,
    "samples": 2,
    "probes": 1,
    "eta_samples": 2,
    "isotropy_samples": 2,
    "eval_count": 1,
    "workers": 1,
    "count": 1,
    "seed": 0,
}
_POSITIVE = ("eig_min", "eig_max")
_TOP_KEYS = ("seed", "output_dir", "workers", "suite", "count")


_SECTIONS = {"task": TaskConfig, "train": TrainConfig, "mc": McConfig}


def _coerce(key: str, value, default):
    """Check ``value`` against the type of ``default``; names ``key`` on failure."""
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float) or default is None:
        ok = isinstance(value, (int, float)) and not isinstance(value, bool) or (default is None and value is None)
        if ok and value is not None:
            value = float(value)
    elif isinstance(default, str):
        ok = isinstance(value, str)
    elif isinstance(default, tuple):
        if isinstance(value, str):
            value = [v for v in value.split(",") if v]
        ok = isinstance(value, (list, tuple))
        if ok:
            want = str if key == "suite" else int
            try:
                value = tuple(want(v) for v in value)
            except (TypeError, ValueError):
                ok = False
    else:
        ok = True
    if not ok:
        raise ConfigError(f"{key}: expected {type(default).__name__ if default is not None else 'number'}, got {value!r}")
    if key in _MINIMUM and value is not None and value < _MINIMUM[key]:
        raise ConfigError(f"{key}: must be >= {_MINIMUM[key]}, got {value!r}")
    if key in _POSITIVE and value <= 0:
        raise ConfigError(f"{key}: must be > 0, got {value!r}")
    if key in _CHOICES and value not in _CHOICES[key]:
        raise ConfigError(f"{key}: must be one of {', '.join(_CHOICES[key])}, got {value!r}")
    if key == "suite":
        bad = [s for s in value if s not in SUITES + ("all",)]
        if bad:
            raise ConfigError(f"suite: unknown suite {bad[0]!r}; expected one of {', '.join(SUITES)} or all")
    if key == "hidden" and any(v < 1 for v in value):
        raise ConfigError("hidden: every width must be >= 1")
    return value


def _merge(cls, base, updates: dict, where: str):
    defaults = {f.name: f.default for f in fields(cls)}
    vals = {}
    for key, value in updates.items():
        if key not in defaults or key == "seed" and cls is TrainConfig:
            raise ConfigError(f"unknown key {where}.{key}" if where else f"unknown key {key}")
        vals[key] = _coerce(key, value, defaults[key])
    try:
        return replace(base, **vals)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _read_config_file(path: str) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"config file {path} must contain a JSON object")
    return doc


# flag dest -> (section, key); section None means top level
_FLAG_TARGETS = {
    **{k: ("task", k) for k in ("kind", "d", "n", "sigma", "eig_min", "eig_max", "hidden", "activation", "output_scale")},
    **{
        k: ("train", k)
        for k in ("optimizer", "step_size", "steps", "batch_size", "init_scale", "parameterization", "schedule", "log_every")
    },
    **{k: ("mc", k) for k in ("samples", "probes", "eta_samples", "isotropy_samples", "eval_count")},
    **{k: (None, k) for k in _TOP_KEYS},
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    S = argparse.SUPPRESS
    g = common.add_argument_group("general")
    g.add_argument("--config", help="JSON config file with sections task/train/mc")
    g.add_argument("--seed", type=int, default=S, help="64-bit root seed (default 0)")
    g.add_argument(
        "--output-dir", dest="output_dir", default=S, help=f"results directory (default ${OUTPUT_DIR_ENV} or ./results)"
    )
    g.add_argument("--workers", type=int, default=S, help="threads for Monte Carlo chunks (results do not depend on it)")
    t = common.add_argument_group("task")
    t.add_argument("--kind", default=S, help="isotropic | skewed | nonlinear (default isotropic)")
    t.add_argument("--d", type=int, default=S, help="input dimension (default 5)")
    t.add_argument("--n", type=int, default=S, help="support examples per prompt (default 20)")
    t.add_argument("--sigma", type=float, default=S, help="label noise std (default 0.5)")
    t.add_argument("--eig-min", dest="eig_min", type=float, default=S, help="skewed covariance eigenvalue floor (0.25)")
    t.add_argument("--eig-max", dest="eig_max", type=float, default=S, help="skewed covariance eigenvalue cap (4)")
    t.add_argument("--hidden", default=S, help="comma-separated MLP hidden widths (default 16)")
    t.add_argument("--activation", default=S, help="tanh | relu")
    t.add_argument("--output-scale", dest="output_scale", type=float, default=S, help="MLP output weight scale (1)")
    tr = common.add_argument_group("training")
    tr.add_argument("--optimizer", default=S, help="adam | plain-gd")
    tr.add_argument("--step-size", dest="step_size", type=float, default=S, help="peak step size (1e-3)")
    tr.add_argument("--steps", type=int, default=S, help="optimisation steps (5000)")
    tr.add_argument("--batch-size", dest="batch_size", type=int, default=S, help="prompts per step (256)")
    tr.add_argument("--init-scale", dest="init_scale", type=float, default=S, help="init std (0.1/sqrt(d+1))")
    tr.add_argument("--parameterization", default=S, help="full | reduced")
    tr.add_argument("--schedule", default=S, help="constant | cosine (cosine)")
    tr.add_argument("--log-every", dest="log_every", type=int, default=S, help="loss curve stride (50)")
    mc = common.add_argument_group("monte carlo")
    mc.add_argument("--samples", type=int, default=S, help="prompts per estimate (100000)")
    mc.add_argument("--probes", type=int, default=S, help="probe parameters for loss constancy (8)")
    mc.add_argument("--eta-samples", dest="eta_samples", type=int, default=S, help="prompts per suite step-size estimate")
    mc.add_argument("--isotropy-samples", dest="isotropy_samples", type=int, default=S, help="prompts per moment matrix")
    mc.add_argument("--eval-count", dest="eval_count", type=int, default=S, help="fresh prompts for model comparison")

    parser = argparse.ArgumentParser(prog="icl-gd", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"icl-gd {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True
    p = sub.add_parser("gen", parents=[common], help="sample a prompt batch to JSON")
    p.add_argument("--count", type=int, default=S, help="number of prompts (1000)")
    sub.add_parser("train", parents=[common], help="train the attention layer; writes report JSON and loss CSV", epilog=CSV_HELP)
    sub.add_parser("eta", parents=[common], help="estimate the optimal step size")
    sub.add_parser("lemmas", parents=[common], help="run the lemmas-linear and lemmas-nonlinear suites")
    p = sub.add_parser("verify", parents=[common], help="run experiment suites")
    p.add_argument("--suite", default=S, help=f"comma-separated suites or 'all': {', '.join(SUITES)}")
    sub.add_parser("report", parents=[common], help="summarise a results directory into summary.md")
    return parser


def parse_config(args: list[str], file: dict | None = None) -> CliConfig:
    """Resolve a :class:`CliConfig`; raises :class:`ConfigError` naming the offending key.

    ``file`` overrides any ``--config`` path in ``args``.
    """
    parser = build_parser()
    ns = vars(parser.parse_args(args))
    command = ns.pop("command")
    path = ns.pop("config", None)
    if file is None and path is not None:
        file = _read_config_file(path)
    file = dict(file or {})
    cfg = CliConfig(command=command, output_dir=os.environ.get(OUTPUT_DIR_ENV, "results"))
    file.pop("command", None)
    layers = [file, _flags_to_doc(ns)]
    for doc in layers:
        for key in doc:
            if key not in _SECTIONS and key not in _TOP_KEYS:
                raise ConfigError(f"unknown key {key}")
        for name, cls in _SECTIONS.items():
            section = doc.get(name, {})
            if not isinstance(section, dict):
                raise ConfigError(f"{name}: expected an object")
            cfg = replace(cfg, **{name: _merge(cls, getattr(cfg, name), section, name)})
        cfg = _merge(CliConfig, cfg, {k: doc[k] for k in _TOP_KEYS if k in doc}, "")
    if cfg.seed >= 1 << 64:
        raise ConfigError("seed: must be < 2^64")
    if cfg.task.eig_min > cfg.task.eig_max:
        raise ConfigError("eig_min: must be <= eig_max")
    return cfg


def _flags_to_doc(ns: dict) -> dict:
    doc: dict = {}
    for dest, value in ns.items():
        section, key = _FLAG_TARGETS[dest]
        if section is None:
            doc[key] = value
        else:
            doc.setdefault(section, {})[key] = value
    return doc


def build_spec(cfg: CliConfig) -> TaskSpec:
    t = cfg.task
    if t.kind == "isotropic":
        return TaskSpec.isotropic(t.d, t.n, t.sigma)
    if t.kind == "skewed":
        cov = sample_spd(t.d, t.eig_min, t.eig_max, RngStream(cfg.seed).split(9))
        return TaskSpec.skewed(cov, t.n, t.sigma)
    target = MlpTargetSpec((t.d, *t.hidden, 1), t.activation, t.output_scale)
    return TaskSpec.nonlinear(target, t.n, t.sigma)


def suite_config(cfg: CliConfig) -> SuiteConfig:
    m = cfg.mc
    return SuiteConfig(
        samples=m.samples,
        isotropy_samples=m.isotropy_samples,
        eta_samples=m.eta_samples,
        probes=m.probes,
        eval_count=m.eval_count,
        workers=cfg.workers,
        train=cfg.train,
    )


def format_table(rows: list[tuple[str, object]], header=("field", "value")) -> str:
    """Fixed-width two-column table; floats use ``repr`` so no digits are lost."""
    cells = [(str(k), repr(v) if isinstance(v, float) else str(v)) for k, v in rows]
    w = max([len(header[0])] + [len(k) for k, _ in cells])
    lines = [f"{header[0]:<{w}}  {header[1]}", f"{'-' * w}  {'-' * max(len(header[1]), 5)}"]
    lines += [f"{k:<{w}}  {v}" for k, v in cells]
    return "\n".join(lines)


def _envelope(kind: str, cfg: CliConfig, payload: dict) -> dict:
    return {"type": kind, "artifact_version": __version__, "resolved_config": cfg.resolved(), **payload}


def _write_sidecar(path: Path, wall_time: float):
    import time

    write_atomic(path, canonical_json({"wall_time_s": wall_time, "unix_time": time.time()}))


def cmd_gen(cfg: CliConfig) -> int:
    spec = build_spec(cfg)
    batch = sample_batch(spec, cfg.count, RngStream(cfg.seed).split(0), cfg.workers)
    path = write_atomic(Path(cfg.output_dir) / f"prompts-{spec.kind.value}-{cfg.seed}.json", batch_to_json(batch))
    print(f"wrote {len(batch)} prompts to {path}")
    return EXIT_OK


def cmd_train(cfg: CliConfig) -> int:
    spec = build_spec(cfg)
    tcfg = replace(cfg.train, seed=cfg.seed)
    try:
        report = train(spec, tcfg)
    except TrainingDivergedError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_FAIL
    stem = Path(cfg.output_dir) / f"train-{spec.kind.value}-{cfg.seed}"
    write_atomic(stem.with_suffix(".json"), canonical_json(_envelope("train", cfg, report.canonical())))
    write_atomic(stem.with_suffix(".csv"), report.to_csv())
    _write_sidecar(stem.with_suffix(".timing.json"), report.wall_time)
    step, loss = report.loss_curve[-1]
    print(format_table([("final_step", step), ("final_batch_loss", loss), ("report", f"{stem}.json")]))
    return EXIT_OK


def cmd_eta(cfg: CliConfig) -> int:
    spec = build_spec(cfg)
    est = estimate_eta(spec, cfg.mc.samples, RngStream(cfg.seed).split(1), cfg.workers)
    doc = est.to_dict()
    path = write_atomic(
        Path(cfg.output_dir) / f"eta-{spec.kind.value}-{cfg.seed}.json", canonical_json(_envelope("eta", cfg, doc))
    )
    print(format_table(list(doc.items())))
    print(f"wrote {path}")
    return EXIT_OK


def _run_suites(cfg: CliConfig, names) -> int:
    scfg = suite_config(cfg)
    ok = True
    rows = []
    for name in names:
        result = run_suite(name, scfg, RngStream(cfg.seed))
        write_suite_result(result, cfg.output_dir, {"resolved_config": cfg.resolved()})
        ok &= result.passed
        rows.append((name, result.status))
        for k, v in result.metrics.items():
            rows.append((f"  {k}", v))
    print(format_table(rows, ("suite", "status / value")))
    return EXIT_OK if ok else EXIT_FAIL


def cmd_lemmas(cfg: CliConfig) -> int:
    return _run_suites(cfg, ("lemmas-linear", "lemmas-nonlinear"))


def cmd_verify(cfg: CliConfig) -> int:
    names = cfg.suite or (f"train-{cfg.task.kind}",)
    if "all" in names:
        names = SUITES
    return _run_suites(cfg, names)


def collect_results(directory: str | Path) -> list[dict]:
    """Every suite, eta and train result document found in ``directory``."""
    out = []
    for path in sorted(Path(directory).glob("*.json")):
        if path.name.endswith(".timing.json"):
            continue
        try:
            doc = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError):
            continue
        if isinstance(doc, dict) and doc.get("type") in ("suite", "eta", "train"):
            doc["_file"] = path.name
            out.append(doc)
    return out


def summary_markdown(docs: list[dict]) -> str:
    lines = ["# Results summary", ""]
    suites = [d for d in docs if d["type"] == "suite"]
    if suites:
        lines += ["| suite | seed | status | checks passed |", "|---|---|---|---|"]
        for d in suites:
            r = SuiteResult.from_dict(d)
            lines.append(f"| {r.name} | {r.seed} | {r.status} | {sum(r.checks.values())}/{len(r.checks)} |")
        lines.append("")
    etas = [d for d in docs if d["type"] == "eta"]
    if etas:
        lines += ["| file | eta | stderr | samples |", "|---|---|---|---|"]
        lines += [f"| {d['_file']} | {d['value']!r} | {d['stderr']!r} | {d['num_samples']} |" for d in etas]
        lines.append("")
    runs = [d for d in docs if d["type"] == "train"]
    if runs:
        lines += ["| file | steps | final batch loss |", "|---|---|---|"]
        lines += [f"| {d['_file']} | {d['loss_curve'][-1][0] + 1} | {d['loss_curve'][-1][1]!r} |" for d in runs]
        lines.append("")
    return "\n".join(lines)


def cmd_report(cfg: CliConfig) -> int:
    directory = Path(cfg.output_dir)
    docs = collect_results(directory) if directory.is_dir() else []
    if not docs:
        print(f"no results found in {directory}", file=sys.stderr)
        return EXIT_FAIL
    path = write_atomic(directory / "summary.md", summary_markdown(docs))
    failed = [d["_file"] for d in docs if d["type"] == "suite" and not d["pass"]]
    print(f"wrote {path} ({len(docs)} results, {len(failed)} failing suites)")
    return EXIT_FAIL if failed else EXIT_OK


_DISPATCH = {
    "gen": cmd_gen,
    "train": cmd_train,
    "eta": cmd_eta,
    "lemmas": cmd_lemmas,
    "verify": cmd_verify,
    "report": cmd_report,
}


def dispatch(cfg: CliConfig) -> int:
    try:
        return _DISPATCH[cfg.command](cfg)
    except OSError as exc:
        where = f" ({exc.filename})" if exc.filename else ""
        print(f"I/O error{where}: {exc.strerror or exc}", file=sys.stderr)
        return EXIT_FAIL


def main(argv: list[str] | None = None) -> int:
    try:
        cfg = parse_config(sys.argv[1:] if argv is None else list(argv))
    except ConfigError as exc:
        print(f"icl-gd: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # argparse usage errors and --help
        return int(exc.code or 0)
    return dispatch(cfg)


if __name__ == "__main__":
    sys.exit(main())
