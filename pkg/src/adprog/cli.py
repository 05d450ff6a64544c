"""Command-line entry point: ``adprog <command> [options]``.

Settings resolve as: command-line flag, then ``--config`` JSON file, then
built-in defaults.  Exit codes: 0 ok, 1 I/O, 2 usage/validation, 3 internal
invariant violation.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, fields

import numpy as np

from .cohort import (LABELS, CohortError, NormalizationError, fit_and_apply_normalizer, load_cohort_csv,
                     stratified_folds, synthesize_cohort, write_cohort_csv)
from .evaluation import (cell_state_analysis, classification_metrics, compare_imputers,
                         conversion_indicator, evaluate_model, transition_group)
from .model import make_batch, rollout_forecast, stack
from .numerics import ConstraintError
from .training import Checkpoint, LossWeights, TrainConfig, cross_validate, prepare_fold, train_model

log = logging.getLogger("adprog")

COMMANDS = ("synth", "train", "eval", "forecast", "analyze-cells", "compare-baselines")
EXIT_OK, EXIT_IO, EXIT_USAGE, EXIT_INVARIANT = 0, 1, 2, 3


class UsageError(ValueError):
    pass


@dataclass
class RunConfig:
    command: str = ""
    seed: int = 0
    threads: int = 1
    # paths
    data: str = ""
    out: str = ""
    truth_out: str = ""
    checkpoint: str = ""
    # synth
    subjects: int = 200
    visits: int = 11
    mri: int = 6
    cog: int = 3
    missing: float = 0.3
    # training
    learning_rate: float = 5e-3
    batch_size: int = 64
    epochs: int = 300
    l2: float = 1e-4
    hidden: int = 64
    patience: int = 30
    removal: float = 0.1
    time_scale: float = 1.0
    visit_interval: float = 1.0
    normalize_losses: bool = True
    imputation_target: str = "removed"
    folds: int = 5
    fold: int = 0
    val_frac: float = 0.1
    test_frac: float = 0.1
    min_visits: int = 3
    all_folds: bool = False
    alpha: float = 0.1
    zeta: float = 0.5
    xi: float = 0.5
    epsilon: float = 5.0
    # evaluation / analysis
    split: str = "test"
    horizon: int = 10
    prefix: int = 0
    horizons: str = "1,5"
    pooled: bool = True

    def validate(self):
        if self.command not in COMMANDS:
            raise UsageError(f"command: unknown command {self.command!r}")
        positive_int = ("threads", "subjects", "visits", "batch_size", "hidden", "folds", "min_visits")
        for key in positive_int:
            if getattr(self, key) < 1:
                raise UsageError(f"{key}: must be at least 1")
        for key in ("mri", "cog", "epochs", "patience", "horizon", "prefix", "fold"):
            if getattr(self, key) < 0:
                raise UsageError(f"{key}: must be non-negative")
        if self.mri + self.cog < 1:
            raise UsageError("mri: at least one feature is required")
        if self.folds < 2:
            raise UsageError("folds: must be at least 2")
        if self.fold >= self.folds:
            raise UsageError(f"fold: must be below folds ({self.folds})")
        for key in ("missing", "removal"):
            if not 0 <= getattr(self, key) < 1:
                raise UsageError(f"{key}: must be in [0, 1)")
        for key in ("learning_rate", "time_scale", "visit_interval"):
            if not getattr(self, key) > 0:
                raise UsageError(f"{key}: must be positive")
        for key in ("l2", "alpha", "zeta", "xi", "epsilon", "val_frac", "test_frac"):
            if not getattr(self, key) >= 0:
                raise UsageError(f"{key}: must be non-negative")
        if self.val_frac + self.test_frac >= 1:
            raise UsageError("val_frac: val_frac + test_frac must be below 1")
        if self.imputation_target not in ("removed", "literal"):
            raise UsageError("imputation_target: must be 'removed' or 'literal'")
        if self.split not in ("train", "val", "test", "all"):
            raise UsageError("split: must be one of train, val, test, all")
        try:
            self.horizon_list()
        except ValueError:
            raise UsageError("horizons: expected comma-separated positive integers") from None
        needs = {"train": ("data", "out"), "eval": ("data", "checkpoint", "out"),
                 "forecast": ("data", "checkpoint", "out"), "analyze-cells": ("data", "checkpoint", "out"),
                 "compare-baselines": ("data", "out"), "synth": ("out",)}
        for key in needs[self.command]:
            if not getattr(self, key):
                raise UsageError(f"{key}: required for {self.command}")
        return self

    def horizon_list(self):
        hs = [int(h) for h in str(self.horizons).split(",") if h.strip()]
        if any(h < 1 for h in hs):
            raise ValueError
        return hs

    def train_config(self):
        keys = {f.name for f in fields(TrainConfig)}
        return TrainConfig(**{k: v for k, v in asdict(self).items() if k in keys})

    def loss_weights(self):
        return LossWeights(self.alpha, self.zeta, self.xi, self.epsilon)


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _bool(text):
    v = str(text).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _coerce(key, value):
    kind = _FIELD_TYPES[key]
    try:
        if kind == "bool":
            return value if isinstance(value, bool) else _bool(value)
        if kind == "int":
            if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                raise ValueError
            return int(value)
        if kind == "float":
            if isinstance(value, bool):
                raise ValueError
            return float(value)
        return str(value)
    except (ValueError, TypeError, argparse.ArgumentTypeError):
        raise UsageError(f"{key}: invalid value {value!r}") from None


def build_parser():
    parser = argparse.ArgumentParser(prog="adprog", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    S = argparse.SUPPRESS

    def common(p):
        p.add_argument("--config", default=None, help="flat JSON file of settings")
        p.add_argument("--seed", type=int, default=S)
        p.add_argument("--threads", type=int, default=S, help="BLAS thread limit")
        p.add_argument("-v", "--verbose", action="store_true")

    def training(p):
        for name, typ in (("learning-rate", float), ("batch-size", int), ("epochs", int), ("l2", float),
                          ("hidden", int), ("patience", int), ("removal", float), ("time-scale", float),
                          ("visit-interval", float), ("folds", int), ("fold", int), ("val-frac", float),
                          ("test-frac", float), ("alpha", float), ("zeta", float), ("xi", float),
                          ("epsilon", float), ("min-visits", int)):
            p.add_argument(f"--{name}", type=typ, default=S)
        p.add_argument("--normalize-losses", type=_bool, default=S, help="normalize losses by scored count")
        p.add_argument("--imputation-target", choices=("removed", "literal"), default=S)

    p = sub.add_parser("synth", help="generate a synthetic cohort CSV and its ground truth")
    common(p)
    for name, typ in (("subjects", int), ("visits", int), ("mri", int), ("cog", int), ("missing", float)):
        p.add_argument(f"--{name}", type=typ, default=S)
    p.add_argument("--out", default=S)
    p.add_argument("--truth-out", default=S)

    p = sub.add_parser("train", help="train one fold (or all folds) and write checkpoints")
    common(p)
    training(p)
    p.add_argument("--data", default=S)
    p.add_argument("--out", default=S, help="output directory")
    p.add_argument("--all-folds", action="store_const", const=True, default=S,
                   help="run k-fold cross-validation")

    for name, helptext in (("eval", "evaluate a checkpoint"),
                           ("forecast", "roll a checkpoint forward per subject"),
                           ("analyze-cells", "rank cell units against status conversion"),
                           ("compare-baselines", "compare imputers on hidden entries")):
        p = sub.add_parser(name, help=helptext)
        common(p)
        p.add_argument("--data", default=S)
        p.add_argument("--checkpoint", default=S)
        p.add_argument("--out", default=S)
        p.add_argument("--split", choices=("train", "val", "test", "all"), default=S)
        if name == "compare-baselines":
            training(p)
        else:
            p.add_argument("--min-visits", type=int, default=S)
        if name == "eval":
            p.add_argument("--removal", type=float, default=S)
            p.add_argument("--horizons", default=S, help="comma-separated rollout horizons")
        if name == "forecast":
            p.add_argument("--horizon", type=int, default=S)
            p.add_argument("--prefix", type=int, default=S, help="visits to encode (0 = all)")
        if name == "analyze-cells":
            p.add_argument("--per-subject", dest="pooled", action="store_const", const=False, default=S)
    return parser


def parse_config(argv):
    """Parse ``argv`` into a validated RunConfig; raises UsageError on bad settings."""
    args = build_parser().parse_args(argv)
    given = {k.replace("-", "_"): v for k, v in vars(args).items() if k not in ("config", "verbose")}
    values = {}
    if args.config:
        try:
            with open(args.config, encoding="utf-8") as fh:
                file_values = json.load(fh)
        except json.JSONDecodeError as exc:
            raise UsageError(f"config: {args.config} is not valid JSON ({exc})") from None
        if not isinstance(file_values, dict):
            raise UsageError("config: file must hold a flat JSON object")
        for key, value in file_values.items():
            if key not in _FIELD_TYPES or key == "command":
                raise UsageError(f"{key}: unknown configuration key")
            values[key] = _coerce(key, value)
    for key, value in given.items():
        values[key] = _coerce(key, value)
    cfg = RunConfig(**values)
    cfg.verbose = args.verbose
    return cfg.validate()


# --------------------------------------------------------------------------
# Artifact helpers
# --------------------------------------------------------------------------

def _sidecar(path, cfg, extra=None):
    meta = {"artifact": os.path.basename(path), "command": cfg.command, "seed": cfg.seed,
            "config": {k: v for k, v in asdict(cfg).items()}}
    if extra:
        meta.update(extra)
    with open(f"{path}.meta.json", "w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps(meta, sort_keys=True, indent=1) + "\n")


def _write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow(["" if v is None else (repr(float(v)) if isinstance(v, (float, np.floating)) else v)
                        for v in row])


def _write_json(path, obj):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps(obj, sort_keys=True, indent=1, default=_json_default) + "\n")


def _json_default(v):
    if isinstance(v, np.generic):
        return v.item()
    if isinstance(v, np.ndarray):
        return v.tolist()
    raise TypeError(type(v).__name__)


def _clean(obj):
    """Replace NaN with None so JSON stays standard."""
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, float) and not np.isfinite(obj):
        return None
    return obj


def _require_file(path):
    if not os.path.isfile(path):
        raise FileNotFoundError(path)


def _load_split(cfg, ckpt=None):
    """Load the data CSV, normalize it and select the requested split.

    Returns ``(split_cohort, train_cohort, spec)`` in normalized units.
    """
    _require_file(cfg.data)
    cohort = load_cohort_csv(cfg.data, min_visits=cfg.min_visits)
    if ckpt is not None:
        tc = ckpt.train_config()
        folds, fold, seed = tc.folds, tc.fold, tc.seed
        val_frac, test_frac = tc.val_frac, tc.test_frac
    else:
        folds, fold, seed, val_frac, test_frac = cfg.folds, cfg.fold, cfg.seed, cfg.val_frac, cfg.test_frac
    f = stratified_folds(cohort, folds, val_frac, test_frac, seed)[fold]
    spec = ckpt.normalization_spec() if ckpt is not None else None
    if spec is None:
        train, val, test, spec = prepare_fold(cohort, f)
    else:
        normed, _ = fit_and_apply_normalizer(cohort, spec=spec)
        train, val, test = normed.subset(f.train), normed.subset(f.val), normed.subset(f.test)
    if cfg.split == "all":
        normed, _ = fit_and_apply_normalizer(cohort, spec=spec)
        return normed, train, spec
    return {"train": train, "val": val, "test": test}[cfg.split], train, spec


def _load_checkpoint(cfg):
    _require_file(cfg.checkpoint)
    return Checkpoint.load(cfg.checkpoint)


# --------------------------------------------------------------------------
# Commands
# --------------------------------------------------------------------------

def cmd_synth(cfg):
    cohort = synthesize_cohort(cfg.subjects, cfg.visits, cfg.mri, cfg.cog, cfg.missing, cfg.seed)
    write_cohort_csv(cohort, cfg.out)
    _sidecar(cfg.out, cfg)
    truth = cfg.truth_out or _suffix(cfg.out, "_truth")
    write_cohort_csv(cohort, truth, use_truth=True)
    _sidecar(truth, cfg)
    log.info("wrote %s and %s", cfg.out, truth)


def _suffix(path, tag):
    root, ext = os.path.splitext(path)
    return f"{root}{tag}{ext or '.csv'}"


def _history_rows(history):
    return [(h["epoch"], h["train_loss"], h["val_loss"], h["val_mauc"], int(h["improved"])) for h in history]


def cmd_train(cfg):
    _require_file(cfg.data)
    cohort = load_cohort_csv(cfg.data, min_visits=cfg.min_visits)
    os.makedirs(cfg.out, exist_ok=True)
    tc, weights = cfg.train_config(), cfg.loss_weights()
    if cfg.all_folds:
        reports, summary, ckpts = cross_validate(cohort, cfg.folds, tc, weights,
                                                 eval_kwargs={"horizons": tuple(cfg.horizon_list()),
                                                              "feature_names": cohort.feature_names})
        for ckpt in ckpts:
            path = os.path.join(cfg.out, f"checkpoint_fold{ckpt.config['fold']}.json")
            ckpt.save(path)
            _sidecar(path, cfg)
        rows = [r.flat() for r in reports]
        keys = list(dict.fromkeys(k for row in rows for k in row))
        path = os.path.join(cfg.out, "cv_report.csv")
        table = [[f"fold{i}"] + [row.get(k) for k in keys] for i, row in enumerate(rows)]
        table.append(["mean"] + [summary.get(k, (None, None))[0] for k in keys])
        table.append(["std"] + [summary.get(k, (None, None))[1] for k in keys])
        _write_csv(path, ["row"] + keys, table)
        _sidecar(path, cfg)
        path = os.path.join(cfg.out, "cv_summary.json")
        _write_json(path, _clean({"folds": [r.to_dict() for r in reports],
                                  "summary": {k: {"mean": m, "std": s} for k, (m, s) in summary.items()}}))
        _sidecar(path, cfg)
        return
    fold = stratified_folds(cohort, tc.folds, tc.val_frac, tc.test_frac, tc.seed)[tc.fold]
    train, val, _, spec = prepare_fold(cohort, fold)
    ckpt, history = train_model(train, val, tc, weights, normalization=spec,
                                log_every=10 if getattr(cfg, "verbose", False) else 0)
    path = os.path.join(cfg.out, "checkpoint.json")
    ckpt.save(path)
    _sidecar(path, cfg)
    path = os.path.join(cfg.out, "history.csv")
    _write_csv(path, ["epoch", "train_loss", "val_loss", "val_mauc", "improved"], _history_rows(history))
    _sidecar(path, cfg)


def cmd_eval(cfg):
    ckpt = _load_checkpoint(cfg)
    split, _, _ = _load_split(cfg, ckpt)
    model = ckpt.build_model()
    tc = ckpt.train_config()
    report = evaluate_model(model, split, removal=cfg.removal, seed=cfg.seed, horizons=tuple(cfg.horizon_list()),
                            visit_interval=tc.visit_interval, feature_names=ckpt.feature_names)
    report.provenance = {"fold": tc.fold, "split": cfg.split, "seed": cfg.seed}
    os.makedirs(cfg.out, exist_ok=True)
    row = report.flat()
    path = os.path.join(cfg.out, "metrics.csv")
    _write_csv(path, list(row), [list(row.values())])
    _sidecar(path, cfg)
    path = os.path.join(cfg.out, "metrics.json")
    _write_json(path, _clean(report.to_dict()))
    _sidecar(path, cfg)


def cmd_forecast(cfg):
    ckpt = _load_checkpoint(cfg)
    split, _, spec = _load_split(cfg, ckpt)
    model = ckpt.build_model()
    tc = ckpt.train_config()
    rows = []
    for s in split:
        P = s.n_visits if cfg.prefix == 0 else min(cfg.prefix, s.n_visits)
        ro = rollout_forecast(model, s, cfg.horizon, prefix_len=P, visit_interval=tc.visit_interval)
        observed = spec.inverse(ro.imputed[:P], s)
        future = spec.inverse(ro.future_values, s) if cfg.horizon else np.zeros((0, model.D))
        for t in range(P):
            probs = ro.prefix[t].probs
            rows.append([s.subject_id, t, float(s.times[t]), 0, *probs, LABELS[int(np.argmax(probs))],
                         *observed[t]])
        for j in range(cfg.horizon):
            probs = ro.future[j].probs
            rows.append([s.subject_id, P + j, float(ro.future_times[j]), 1, *probs,
                         LABELS[int(np.argmax(probs))], *future[j]])
    header = ["subject_id", "step", "time_years", "is_future", "p_CN", "p_MCI", "p_AD", "predicted"]
    os.makedirs(os.path.dirname(os.path.abspath(cfg.out)), exist_ok=True)
    _write_csv(cfg.out, header + list(ckpt.feature_names), rows)
    _sidecar(cfg.out, cfg)


def cmd_analyze_cells(cfg):
    ckpt = _load_checkpoint(cfg)
    split, _, _ = _load_split(cfg, ckpt)
    model = ckpt.build_model()
    traces_, indicators, groups = [], [], []
    by_len = {}
    for s in split:
        by_len.setdefault(s.n_visits, []).append(s)
    for T in sorted(by_len):
        members = by_len[T]
        batch = make_batch(members, None, model.time_scale)
        cells = stack(model.unroll(batch), "c")
        for s, c in zip(members, cells):
            g = transition_group(s.labels, s.label_mask)
            if g in ("CN-MCI", "MCI-AD"):
                traces_.append(c)
                indicators.append(conversion_indicator(s.labels, s.label_mask))
                groups.append(g)
    if not groups:
        raise UsageError("split: no subjects with CN-MCI or MCI-AD transitions")
    rows, common = cell_state_analysis(traces_, indicators, groups, pooled=cfg.pooled)
    _write_csv(cfg.out, ["unit", "group", "coefficient", "normalized", "flagged"],
               [[r["unit"], r["group"], r["coefficient"], r["normalized"], int(r["flagged"])] for r in rows])
    counts = {g: groups.count(g) for g in sorted(set(groups))}
    _sidecar(cfg.out, cfg, {"common_units": common, "group_sizes": counts})


def cmd_compare_baselines(cfg):
    ckpt = _load_checkpoint(cfg) if cfg.checkpoint else None
    split, train, _ = _load_split(cfg, ckpt)
    model = ckpt.build_model() if ckpt is not None else None
    table = compare_imputers(model, split, train, removal=cfg.removal, seed=cfg.seed)
    _write_csv(cfg.out, ["method", "MAE", "MRE", "n"],
               [[k, v["MAE"], v["MRE"], v["n"]] for k, v in table.items()])
    _sidecar(cfg.out, cfg)


DISPATCH = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "forecast": cmd_forecast,
            "analyze-cells": cmd_analyze_cells, "compare-baselines": cmd_compare_baselines}


def dispatch(cfg):
    """Run a parsed command; returns the process exit status."""
    try:
        from threadpoolctl import threadpool_limits
        with threadpool_limits(limits=cfg.threads):
            DISPATCH[cfg.command](cfg)
    except UsageError as exc:
        print(f"adprog: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        print(f"adprog: cannot read or write {exc.filename or exc}", file=sys.stderr)
        return EXIT_IO
    except (CohortError, NormalizationError, json.JSONDecodeError, KeyError) as exc:
        print(f"adprog: bad input: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ConstraintError, FloatingPointError, AssertionError, RuntimeError, ValueError) as exc:
        print(f"adprog: internal invariant violated: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    return EXIT_OK


def main(argv=None):
    argv = sys.argv[1:] if argv is None else argv
    try:
        cfg = parse_config(argv)
    except UsageError as exc:
        print(f"adprog: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"adprog: cannot read {exc.filename}", file=sys.stderr)
        return EXIT_IO
    logging.basicConfig(level=logging.INFO if cfg.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return dispatch(cfg)


if __name__ == "__main__":
    sys.exit(main())
