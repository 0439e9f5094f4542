"""Command-line front end: allocate / analyze / ci / simulate.

Every run logs its fully resolved configuration and master seed, and every
output file embeds (or is accompanied by) a hash of that configuration, so
outputs are regenerable from the log alone. Exit codes: 0 success, 2 usage
error, 3 data error, 4 numeric error.
"""

from __future__ import annotations

import argparse
import dataclasses
import difflib
import hashlib
import json
import logging
import math
import os
import sys
from dataclasses import dataclass, field

from . import __version__
from .data_model import (
    Design,
    DistanceSpec,
    Tier,
    TrialFrame,
    load_csv,
    validate_design,
    write_csv,
)
from .dml import LearnerSpec
from .errors import DataError, NumericError, RerandError
from .inference import LimitSpec, confidence_interval
from .simlab import (
    CustomDgp,
    DgpSpec,
    SimConfig,
    SimEstimator,
    config_hash,
    report_csv_lines,
    run_simulation,
    scheme_inference,
    apply_estimator,
    _jsonable,
)
from ._seeds import derive_seed
from .allocation import rerandomize

log = logging.getLogger("rerand")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


@dataclass
class CommandOutcome:
    exit_code: int
    files: list[str] = field(default_factory=list)
    log_records: list[dict] = field(default_factory=list)


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def _all_option_strings(self) -> list[str]:
        options = list(self._option_string_actions)
        for action in self._subparsers._group_actions if self._subparsers else []:
            if isinstance(action, argparse._SubParsersAction):
                for sub in action.choices.values():
                    options.extend(sub._option_string_actions)
        return options

    def error(self, message: str) -> None:  # type: ignore[override]
        if "unrecognized arguments:" in message:
            stray = message.split("unrecognized arguments:")[1].split()
            options = self._all_option_strings()
            for token in stray:
                hits = difflib.get_close_matches(token, options, n=1)
                if hits:
                    message += f" (did you mean '{hits[0]}'?)"
                    break
        raise _UsageError(message)


def _hash_payload(payload: dict) -> str:
    text = json.dumps(_jsonable(payload), sort_keys=True)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def _parse_kv_file(path: str) -> dict:
    """Parse a `key = value` config file; `tier` and `estimator` repeat."""
    values: dict = {}
    try:
        with open(path, encoding="utf-8") as handle:
            lines = handle.readlines()
    except OSError as exc:
        raise DataError(f"cannot read config file: {exc}") from None
    for lineno, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise DataError(f"{path}:{lineno}: expected 'key = value'")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if key in ("tier", "estimator"):
            values.setdefault(key, []).append(value)
        else:
            values[key] = value
    return values


def _parse_bool(text: str) -> bool:
    if text.lower() in ("true", "yes", "1", "on"):
        return True
    if text.lower() in ("false", "no", "0", "off"):
        return False
    raise DataError(f"expected a boolean, got '{text}'")


def _parse_float(text: str) -> float:
    if text.lower() in ("inf", "+inf", "infinity"):
        return math.inf
    return float(text)


def _resolve_columns(tokens: str, frame: TrialFrame) -> tuple[int, ...]:
    out = []
    for token in tokens.split(","):
        token = token.strip()
        if not token:
            continue
        if token.lstrip("-").isdigit():
            out.append(int(token))
        else:
            try:
                out.append(frame.covariate_names.index(token))
            except ValueError:
                raise DataError(f"no covariate column named '{token}'") from None
    return tuple(out)


def design_from_config(cfg: dict, frame: TrialFrame, prefix: str = "") -> Design:
    def get(key, default=None):
        return cfg.get(prefix + key, default)

    rerand = get("rerand", "")
    indices = _resolve_columns(rerand, frame) if rerand else ()
    distance = DistanceSpec(kind=get("distance", "mahalanobis"))
    tiers = []
    for spec in cfg.get(prefix + "tier", []):
        parts = [p.strip() for p in spec.split(":")]
        if len(parts) < 2:
            raise DataError(f"tier spec '{spec}' needs 'columns : threshold'")
        tier_idx = _resolve_columns(parts[0], frame)
        kind = parts[2] if len(parts) > 2 else "mahalanobis"
        tiers.append(
            Tier(indices=tier_idx, threshold=_parse_float(parts[1]), distance=DistanceSpec(kind=kind))
        )
    return Design(
        pi=_parse_float(get("pi", "0.5")),
        scheme=get("scheme", "simple"),
        rerand_covariates=indices,
        threshold_t=_parse_float(get("t", "inf")),
        distance=distance,
        tiers=tuple(tiers),
        block_size=int(get("block_size", "2")),
        max_attempts=int(get("max_attempts", "1000000")),
        stratified_statistic=get("statistic", "pooled"),
    )


def _parse_learner(token: str) -> LearnerSpec | None:
    token = token.strip()
    if token in ("", "none"):
        return None
    parts = token.split(":")
    kind = parts[0]
    if kind == "glm":
        return LearnerSpec(kind="glm", link=parts[1] if len(parts) > 1 else "identity")
    if kind == "knn":
        return LearnerSpec(kind="knn", k_neighbors=int(parts[1]) if len(parts) > 1 else 5)
    if kind == "stump":
        return LearnerSpec(
            kind="stump_ensemble",
            trees=int(parts[1]) if len(parts) > 1 else 200,
            learning_rate=float(parts[2]) if len(parts) > 2 else 0.1,
        )
    raise DataError(f"unknown learner token '{token}'")


def _estimator_from_tokens(spec: str) -> SimEstimator:
    tokens = spec.split()
    if not tokens:
        raise DataError("empty estimator spec")
    kind = tokens[0]
    kwargs: dict = {"kind": kind}
    for token in tokens[1:]:
        if "=" not in token:
            raise DataError(f"estimator option '{token}' is not key=value")
        key, _, value = token.partition("=")
        if key == "covariates":
            kwargs["covariates"] = tuple(v for v in value.split(",") if v)
        elif key == "missing_covariates":
            kwargs["missing_covariates"] = tuple(v for v in value.split(",") if v)
        elif key == "interactions":
            kwargs["interactions"] = _parse_bool(value)
        elif key in ("estimand", "label", "link"):
            kwargs[key] = value
        elif key == "folds":
            kwargs["folds"] = int(value)
        elif key == "fold_mode":
            kwargs["fold_mode"] = value.replace("-", "_")
        elif key == "learners":
            outcome, _, miss = value.partition(",")
            kwargs["outcome_learner"] = _parse_learner(outcome)
            kwargs["missingness_learner"] = _parse_learner(miss)
        else:
            raise DataError(f"unknown estimator option '{key}'")
    return SimEstimator(**kwargs)


def sim_config_from_file(path: str) -> SimConfig:
    cfg = _parse_kv_file(path)

    custom = None
    custom_fields = {f.name for f in dataclasses.fields(CustomDgp)}
    custom_kwargs = {}
    for key, value in cfg.items():
        if key.startswith("dgp.") and key[4:] in custom_fields:
            name = key[4:]
            custom_kwargs[name] = (
                _parse_bool(value) if name == "binary" else _parse_float(value)
            )
    family = cfg.get("dgp.family", "continuous_sec7")
    if family == "custom":
        custom = CustomDgp(**custom_kwargs)
    dgp = DgpSpec(
        family=family,
        n=int(cfg.get("dgp.n", "400")),
        missingness=_parse_bool(cfg.get("dgp.missingness", "false")),
        custom=custom,
    )

    # design columns are resolved against the DGP's covariate layout
    from .simlab import generate_trial

    probe = generate_trial(dgp, 0).allocation_frame()
    design = design_from_config(
        {k[7:]: v for k, v in cfg.items() if k.startswith("design.")}, probe
    )

    estimators = tuple(
        _estimator_from_tokens(spec) for spec in cfg.get("estimator", [])
    )
    if not estimators:
        raise DataError("config defines no estimators")

    truth = None
    for contrast in ("difference", "ratio"):
        key = f"truth.{contrast}"
        if key in cfg:
            parts = [p.strip() for p in cfg[key].split(",")]
            if len(parts) != 2:
                raise DataError(f"{key} must be 'delta_star, mcse'")
            truth = truth or {}
            truth[contrast] = (float(parts[0]), float(parts[1]))

    workers = int(os.environ.get("RERAND_WORKERS", cfg.get("workers", "1")))
    return SimConfig(
        dgp=dgp,
        design=design,
        estimators=estimators,
        replicates=int(cfg.get("replicates", "1000")),
        master_seed=int(cfg.get("master_seed", "0")),
        alpha=float(cfg.get("alpha", "0.05")),
        ci_draws=int(cfg.get("ci_draws", "10000")),
        workers=workers,
        truth=truth,
        truth_draws=int(cfg.get("truth_draws", "10000000")),
        keep_replicates=_parse_bool(cfg.get("keep_replicates", "false")),
    )


def _build_parser() -> _Parser:
    parser = _Parser(prog="rerand", description=__doc__)
    parser.add_argument("--version", action="version", version=f"rerand {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p_alloc = sub.add_parser("allocate", help="assign treatment under a design")
    p_alloc.add_argument("--design", required=True, help="design config file")
    p_alloc.add_argument("--data", required=True, help="input CSV")
    p_alloc.add_argument("--seed", required=True, type=int)
    p_alloc.add_argument("--out", required=True, help="output CSV (arm appended)")

    p_an = sub.add_parser("analyze", help="estimate a treatment effect")
    p_an.add_argument("--data", required=True)
    p_an.add_argument(
        "--estimator",
        required=True,
        choices=["unadjusted", "ancova", "glm2", "drwls", "mixed", "dml"],
    )
    p_an.add_argument("--estimand", default="difference", choices=["difference", "ratio"])
    p_an.add_argument("--covariates", default=None, help="comma list; 'stratum' expands dummies")
    p_an.add_argument("--missing-covariates", dest="missing_covariates", default=None)
    p_an.add_argument("--interactions", action="store_true")
    p_an.add_argument("--link", default="identity", choices=["identity", "logit"])
    p_an.add_argument("--learners", default="stump:200:0.1,glm:logit")
    p_an.add_argument("--folds", type=int, default=5)
    p_an.add_argument("--fold-mode", dest="fold_mode", default="plain", choices=["plain", "stratum-arm"])
    p_an.add_argument("--design", default=None, help="design config for scheme-aware inference")
    p_an.add_argument("--alpha", type=float, default=0.05)
    p_an.add_argument("--draws", type=int, default=10_000)
    p_an.add_argument("--seed", type=int, default=0)
    p_an.add_argument("--out", default=None, help="write JSON here instead of stdout")

    p_ci = sub.add_parser("ci", help="confidence interval from the limit law")
    p_ci.add_argument("--delta", required=True, type=float)
    p_ci.add_argument("--v", required=True, type=float)
    p_ci.add_argument("--r2", required=True, type=float)
    p_ci.add_argument("--q", required=True, type=int)
    p_ci.add_argument("--t", required=True, type=_parse_float)
    p_ci.add_argument("--n", required=True, type=int)
    p_ci.add_argument("--alpha", type=float, default=0.05)
    p_ci.add_argument("--draws", type=int, default=10_000)
    p_ci.add_argument("--seed", type=int, default=0)
    p_ci.add_argument("--out", default=None)

    p_sim = sub.add_parser("simulate", help="run a replicated experiment")
    p_sim.add_argument("--config", required=True)
    p_sim.add_argument("--out", required=True, help="JSON report path")
    p_sim.add_argument("--csv", default=None, help="optional CSV mirror")
    return parser


def _emit(payload: dict, out_path: str | None, outcome: CommandOutcome) -> None:
    text = json.dumps(_jsonable(payload), sort_keys=True, indent=2) + "\n"
    if out_path:
        with open(out_path, "w", encoding="utf-8") as handle:
            handle.write(text)
        outcome.files.append(out_path)
    else:
        sys.stdout.write(text)


def _cmd_allocate(args, outcome: CommandOutcome) -> None:
    frame = load_csv(args.data)
    design = design_from_config(_parse_kv_file(args.design), frame)
    validate_design(design, frame)
    resolved = {"design": dataclasses.asdict(design), "seed": args.seed, "data": args.data}
    digest = _hash_payload(resolved)
    _log_record(outcome, "allocate", resolved, digest)
    alloc = rerandomize(frame, design, args.seed)
    write_csv(frame.with_arms(alloc.arms), args.out)
    outcome.files.append(args.out)
    meta = {
        "attempts": alloc.attempts,
        "accepted_distance": alloc.accepted_distance,
        "tier_distances": alloc.tier_distances,
        "imbalance": alloc.imbalance,
        "seed": args.seed,
        "config_hash": digest,
        "design": dataclasses.asdict(design),
    }
    _emit(meta, args.out + ".meta.json", outcome)


def _cmd_analyze(args, outcome: CommandOutcome) -> None:
    frame = load_csv(args.data)
    frame.require_arms()
    covs = args.covariates
    if covs is None:
        names = list(frame.covariate_names)
        if frame.stratum is not None:
            names.append("stratum")
        covariates = tuple(names)
    else:
        covariates = tuple(v for v in covs.split(",") if v)
    outcome_l, _, miss_l = args.learners.partition(",")
    est = SimEstimator(
        kind=args.estimator,
        estimand=args.estimand,
        covariates=covariates,
        interactions=args.interactions,
        link=args.link,
        missing_covariates=tuple(v for v in (args.missing_covariates or "").split(",") if v)
        or None,
        outcome_learner=_parse_learner(outcome_l),
        missingness_learner=_parse_learner(miss_l),
        folds=args.folds,
        fold_mode=args.fold_mode.replace("-", "_"),
    )
    if args.design:
        design = design_from_config(_parse_kv_file(args.design), frame)
        validate_design(design, frame)
    else:
        design = Design(pi=0.5, scheme="simple")
    resolved = {
        "estimator": dataclasses.asdict(est),
        "design": dataclasses.asdict(design),
        "alpha": args.alpha,
        "draws": args.draws,
        "seed": args.seed,
        "data": args.data,
    }
    digest = _hash_payload(resolved)
    _log_record(outcome, "analyze", resolved, digest)
    result = apply_estimator(est, frame, design, derive_seed(args.seed, "analyze"), 0)
    info = scheme_inference(
        est, result, frame, design, args.alpha, args.draws, derive_seed(args.seed, "ci")
    )
    payload = {
        "delta_hat": result.delta_hat,
        "V_hat": info["v_hat"],
        "R2_hat": info["r2_hat"],
        "ci": {
            "lower": info["ci_true"].lower,
            "upper": info["ci_true"].upper,
            "alpha": args.alpha,
            "v_qt": info["ci_true"].v_qt,
        },
        "ci_normal": {"lower": info["ci_normal"].lower, "upper": info["ci_normal"].upper},
        "method": {
            "estimator": est.kind,
            "estimand": est.estimand,
            "scheme": design.scheme,
            "n_units": len(result.if_values),
        },
        "config_hash": digest,
    }
    _emit(payload, args.out, outcome)


def _cmd_ci(args, outcome: CommandOutcome) -> None:
    resolved = {
        k: getattr(args, k)
        for k in ("delta", "v", "r2", "q", "t", "n", "alpha", "draws", "seed")
    }
    digest = _hash_payload(resolved)
    _log_record(outcome, "ci", resolved, digest)
    spec = LimitSpec(V=args.v, R2=args.r2, q=args.q, t=args.t)
    ci = confidence_interval(args.delta, spec, args.n, args.alpha, args.draws, args.seed)
    payload = {
        "lower": ci.lower,
        "upper": ci.upper,
        "v_qt": ci.v_qt,
        "method": {"draws": ci.draws, "alpha": ci.alpha, "q": args.q, "t": args.t},
        "config_hash": digest,
    }
    _emit(payload, args.out, outcome)


def _cmd_simulate(args, outcome: CommandOutcome) -> None:
    config = sim_config_from_file(args.config)
    resolved = dataclasses.asdict(config)
    digest = config_hash(config)
    _log_record(outcome, "simulate", resolved, digest)
    report = run_simulation(config)
    log.info("simulate finished in %.1fs", report.elapsed_seconds)
    with open(args.out, "w", encoding="utf-8") as handle:
        handle.write(report.to_json())
    outcome.files.append(args.out)
    if args.csv:
        with open(args.csv, "w", encoding="utf-8") as handle:
            handle.write("\n".join(report_csv_lines(report)) + "\n")
        outcome.files.append(args.csv)


def _log_record(outcome: CommandOutcome, command: str, resolved: dict, digest: str) -> None:
    record = {
        "command": command,
        "config": _jsonable(resolved),
        "config_hash": digest,
        "version": __version__,
    }
    outcome.log_records.append(record)
    log.info("resolved config: %s", json.dumps(record, sort_keys=True))


def run_command(argv: list[str]) -> CommandOutcome:
    """Dispatch one CLI invocation; returns its outcome instead of exiting."""
    outcome = CommandOutcome(exit_code=EXIT_OK)
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        handler = {
            "allocate": _cmd_allocate,
            "analyze": _cmd_analyze,
            "ci": _cmd_ci,
            "simulate": _cmd_simulate,
        }[args.command]
        handler(args, outcome)
    except SystemExit as exc:  # argparse --version / --help
        outcome.exit_code = int(exc.code or 0)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        outcome.exit_code = EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        outcome.exit_code = EXIT_DATA
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        outcome.exit_code = EXIT_DATA
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        outcome.exit_code = EXIT_NUMERIC
    except RerandError as exc:
        print(f"error: {exc}", file=sys.stderr)
        outcome.exit_code = EXIT_NUMERIC
    return outcome


def main() -> None:
    logging.basicConfig(level=logging.INFO, stream=sys.stderr, format="%(message)s")
    sys.exit(run_command(sys.argv[1:]).exit_code)
