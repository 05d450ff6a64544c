"""Longitudinal cohort data model and preparation.

Values are stored visit-major: ``values[t, d]`` is feature ``d`` at visit
``t``.  Absent entries hold 0.0 and are flagged by ``mask[t, d] == False``;
no sentinel value ever stands in for "missing".
"""

from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass, replace

import numpy as np

log = logging.getLogger(__name__)

LABELS = ("CN", "MCI", "AD")
LABEL_INDEX = {name: k for k, name in enumerate(LABELS)}
KINDS = ("MRI", "Cog")


class CohortError(ValueError):
    """Invalid cohort content (duplicate visits, bad ordering, ...)."""


class CohortParseError(CohortError):
    def __init__(self, message, line=None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class NormalizationError(ValueError):
    pass


@dataclass
class SubjectSequence:
    subject_id: str
    times: np.ndarray          # (T,) years, strictly increasing
    values: np.ndarray         # (T, D)
    mask: np.ndarray           # (T, D) bool
    labels: np.ndarray         # (T,) int in {0, 1, 2}
    label_mask: np.ndarray     # (T,) bool
    icv: float | None = None
    truth: np.ndarray | None = None          # (T, D) complete values, synthetic only
    truth_labels: np.ndarray | None = None   # (T,) complete labels, synthetic only

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64)
        self.values = np.asarray(self.values, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=bool)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.label_mask = np.asarray(self.label_mask, dtype=bool)
        T = self.times.shape[0]
        if T < 1:
            raise CohortError(f"{self.subject_id}: a sequence needs at least one visit")
        if self.values.ndim != 2 or self.values.shape[0] != T or self.mask.shape != self.values.shape:
            raise CohortError(f"{self.subject_id}: values/mask shapes {self.values.shape}/{self.mask.shape} "
                              f"do not match {T} visits")
        if self.labels.shape != (T,) or self.label_mask.shape != (T,):
            raise CohortError(f"{self.subject_id}: label arrays must have length {T}")
        if T > 1 and np.any(np.diff(self.times) <= 0):
            raise CohortError(f"{self.subject_id}: visit times must be strictly increasing")
        self.values = np.where(self.mask, self.values, 0.0)
        self.labels = np.where(self.label_mask, self.labels, 0)

    @property
    def n_visits(self):
        return self.times.shape[0]

    @property
    def baseline_label(self):
        """Label at the first visit, or None when it was not recorded."""
        return int(self.labels[0]) if self.label_mask[0] else None


@dataclass
class Cohort:
    subjects: list[SubjectSequence]
    feature_names: list[str]
    feature_kinds: list[str]
    n_excluded: int = 0

    def __post_init__(self):
        if len(self.feature_names) != len(self.feature_kinds):
            raise CohortError("feature_names and feature_kinds differ in length")
        for kind in self.feature_kinds:
            if kind not in KINDS:
                raise CohortError(f"unknown feature kind {kind!r}")

    def __len__(self):
        return len(self.subjects)

    def __iter__(self):
        return iter(self.subjects)

    @property
    def n_features(self):
        return len(self.feature_names)

    @property
    def mri_index(self):
        return np.array([d for d, k in enumerate(self.feature_kinds) if k == "MRI"], dtype=np.int64)

    @property
    def cog_index(self):
        return np.array([d for d, k in enumerate(self.feature_kinds) if k == "Cog"], dtype=np.int64)

    def ids(self):
        return [s.subject_id for s in self.subjects]

    def subset(self, ids):
        lookup = {s.subject_id: s for s in self.subjects}
        return replace(self, subjects=[lookup[i] for i in ids], n_excluded=0)

    def with_subjects(self, subjects):
        return replace(self, subjects=list(subjects), n_excluded=0)


# --------------------------------------------------------------------------
# CSV I/O
# --------------------------------------------------------------------------

def _feature_kind(column):
    if column.startswith("mri_"):
        return "MRI"
    if column.startswith("cog_"):
        return "Cog"
    return None


def load_cohort_csv(path, min_visits=3):
    """Read a cohort CSV.

    Columns: ``subject_id, time_years, label[, icv], mri_*..., cog_*...``.
    Blank cells are missing.  Subjects with fewer than ``min_visits`` visits
    are dropped and counted in ``Cohort.n_excluded``.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise CohortParseError("empty file", line=1) from None
        header = [h.strip() for h in header]
        if header[:3] != ["subject_id", "time_years", "label"]:
            raise CohortParseError("header must start with subject_id,time_years,label", line=1)
        rest = header[3:]
        has_icv = bool(rest) and rest[0] == "icv"
        feature_cols = rest[1:] if has_icv else rest
        kinds = [_feature_kind(c) for c in feature_cols]
        if not feature_cols or any(k is None for k in kinds):
            raise CohortParseError("feature columns must be prefixed mri_ or cog_", line=1)

        rows: dict[str, list] = {}
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise CohortParseError(f"expected {len(header)} cells, got {len(row)}", line=lineno)
            sid = row[0].strip()
            if not sid:
                raise CohortParseError("empty subject_id", line=lineno)
            try:
                t = float(row[1])
            except ValueError:
                raise CohortParseError(f"bad time_years {row[1]!r}", line=lineno) from None
            label = row[2].strip()
            if label and label not in LABEL_INDEX:
                raise CohortParseError(f"unknown label {label!r}", line=lineno)
            icv = None
            offset = 3
            if has_icv:
                cell = row[3].strip()
                offset = 4
                if cell:
                    try:
                        icv = float(cell)
                    except ValueError:
                        raise CohortParseError(f"bad icv {cell!r}", line=lineno) from None
            vals = []
            for c, cell in zip(feature_cols, row[offset:]):
                cell = cell.strip()
                if not cell:
                    vals.append(None)
                    continue
                try:
                    v = float(cell)
                except ValueError:
                    raise CohortParseError(f"bad value {cell!r} in {c}", line=lineno) from None
                if not np.isfinite(v):
                    raise CohortParseError(f"non-finite value in {c}", line=lineno)
                vals.append(v)
            rows.setdefault(sid, []).append((t, label, icv, vals, lineno))

    subjects = []
    excluded = 0
    D = len(feature_cols)
    for sid, visits in rows.items():
        visits.sort(key=lambda r: r[0])
        times = [v[0] for v in visits]
        for a, b in zip(visits, visits[1:]):
            if a[0] == b[0]:
                raise CohortError(f"duplicate visit for subject {sid} at time {a[0]} (line {b[4]})")
        if len(visits) < min_visits:
            excluded += 1
            continue
        T = len(visits)
        values = np.zeros((T, D))
        mask = np.zeros((T, D), dtype=bool)
        labels = np.zeros(T, dtype=np.int64)
        lmask = np.zeros(T, dtype=bool)
        icvs = [v[2] for v in visits if v[2] is not None]
        for t, (_, label, _, vals, _) in enumerate(visits):
            for d, v in enumerate(vals):
                if v is not None:
                    values[t, d] = v
                    mask[t, d] = True
            if label:
                labels[t] = LABEL_INDEX[label]
                lmask[t] = True
        subjects.append(SubjectSequence(sid, np.array(times), values, mask, labels, lmask,
                                        icv=float(np.mean(icvs)) if icvs else None))
    if excluded:
        log.info("excluded %d subject(s) with fewer than %d visits", excluded, min_visits)
    return Cohort(subjects, list(feature_cols), kinds, n_excluded=excluded)


def _fmt(v):
    return repr(float(v))


def write_cohort_csv(cohort, path, use_truth=False):
    """Write ``cohort`` in the CSV schema; ``use_truth`` writes the complete values."""
    has_icv = any(s.icv is not None for s in cohort)
    header = ["subject_id", "time_years", "label"] + (["icv"] if has_icv else []) + list(cohort.feature_names)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for s in cohort:
            for t in range(s.n_visits):
                if use_truth:
                    if s.truth is None:
                        raise CohortError(f"{s.subject_id} has no ground truth")
                    vals = [_fmt(v) for v in s.truth[t]]
                    lab = LABELS[s.truth_labels[t]] if s.truth_labels is not None else (
                        LABELS[s.labels[t]] if s.label_mask[t] else "")
                else:
                    vals = [_fmt(v) if m else "" for v, m in zip(s.values[t], s.mask[t])]
                    lab = LABELS[s.labels[t]] if s.label_mask[t] else ""
                row = [s.subject_id, _fmt(s.times[t]), lab]
                if has_icv:
                    row.append(_fmt(s.icv) if s.icv is not None else "")
                w.writerow(row + vals)


# --------------------------------------------------------------------------
# Normalization
# --------------------------------------------------------------------------

@dataclass
class NormalizationSpec:
    feature_names: list[str]
    feature_kinds: list[str]
    mins: np.ndarray
    maxs: np.ndarray
    use_icv: bool = False

    def to_dict(self):
        return {
            "feature_names": list(self.feature_names),
            "feature_kinds": list(self.feature_kinds),
            "mins": [float(v) for v in self.mins],
            "maxs": [float(v) for v in self.maxs],
            "use_icv": bool(self.use_icv),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(list(d["feature_names"]), list(d["feature_kinds"]),
                   np.array(d["mins"], dtype=np.float64), np.array(d["maxs"], dtype=np.float64),
                   bool(d.get("use_icv", False)))

    def _icv_scale(self, subject):
        D = len(self.feature_kinds)
        scale = np.ones(D)
        if self.use_icv and subject.icv is not None:
            scale[[k == "MRI" for k in self.feature_kinds]] = subject.icv
        return scale

    def forward(self, values, subject):
        v = values / self._icv_scale(subject)
        unit = (v - self.mins) / (self.maxs - self.mins)
        is_mri = np.array([k == "MRI" for k in self.feature_kinds])
        return np.where(is_mri, 2.0 * unit - 1.0, unit)

    def inverse(self, values, subject):
        is_mri = np.array([k == "MRI" for k in self.feature_kinds])
        unit = np.where(is_mri, (values + 1.0) / 2.0, values)
        v = unit * (self.maxs - self.mins) + self.mins
        return v * self._icv_scale(subject)


def fit_normalizer(cohort):
    """Per-feature min/max over observed entries (MRI values divided by ICV when present)."""
    use_icv = any(s.icv is not None for s in cohort)
    D = cohort.n_features
    mins = np.full(D, np.inf)
    maxs = np.full(D, -np.inf)
    probe = NormalizationSpec(cohort.feature_names, cohort.feature_kinds, np.zeros(D), np.ones(D), use_icv)
    for s in cohort:
        v = s.values / probe._icv_scale(s)
        for d in range(D):
            obs = v[s.mask[:, d], d]
            if obs.size:
                mins[d] = min(mins[d], obs.min())
                maxs[d] = max(maxs[d], obs.max())
    for d, name in enumerate(cohort.feature_names):
        if not np.isfinite(mins[d]) or not maxs[d] > mins[d]:
            raise NormalizationError(f"feature {name!r} is degenerate (min == max or never observed)")
    return NormalizationSpec(list(cohort.feature_names), list(cohort.feature_kinds), mins, maxs, use_icv)


def apply_normalizer(cohort, spec, direction="forward"):
    if direction not in ("forward", "inverse"):
        raise ValueError(f"direction must be 'forward' or 'inverse', got {direction!r}")
    if list(spec.feature_names) != list(cohort.feature_names):
        raise NormalizationError("normalizer was fitted on different features")
    out = []
    for s in cohort:
        fn = spec.forward if direction == "forward" else spec.inverse
        values = np.where(s.mask, fn(s.values, s), 0.0)
        truth = fn(s.truth, s) if s.truth is not None else None
        out.append(replace(s, values=values, truth=truth))
    return cohort.with_subjects(out)


def fit_and_apply_normalizer(cohort, direction="forward", spec=None):
    """Normalize ``cohort``; fits a spec from it when ``spec`` is None (forward only).

    Returns ``(cohort, spec)``.
    """
    if spec is None:
        if direction != "forward":
            raise NormalizationError("inverse normalization requires a fitted spec")
        spec = fit_normalizer(cohort)
    return apply_normalizer(cohort, spec, direction), spec


# --------------------------------------------------------------------------
# Time delays
# --------------------------------------------------------------------------

def compute_delay_tensor(times, mask, time_scale=1.0):
    """Elapsed time since each feature was last observed, shape ``(T, D)``.

    The first visit has delay 1; later visits add the visit gap, accumulating
    across visits where the feature was missing.  ``time_scale`` converts the
    stored time unit into the delay unit.
    """
    times = np.asarray(times, dtype=np.float64) * time_scale
    mask = np.asarray(mask, dtype=bool)
    T, D = mask.shape
    delta = np.empty((T, D))
    delta[0] = 1.0
    for t in range(1, T):
        gap = times[t] - times[t - 1]
        delta[t] = np.where(mask[t - 1], gap, gap + delta[t - 1])
    return delta


def delay_tensor(seq, mask=None, time_scale=1.0):
    return compute_delay_tensor(seq.times, seq.mask if mask is None else mask, time_scale)


# --------------------------------------------------------------------------
# Artificial removal
# --------------------------------------------------------------------------

def plan_random_removal(cohort, p, seed):
    """Hide ``round(p * N_obs)`` observed entries chosen uniformly over the cohort.

    Returns ``{subject_id: keep}`` where ``keep`` is a ``(T, D)`` bool array that
    is False exactly at removed entries.
    """
    if not 0.0 <= p < 1.0:
        raise ValueError(f"removal fraction must be in [0, 1), got {p}")
    rng = np.random.default_rng(seed)
    offsets = np.cumsum([0] + [int(s.mask.sum()) for s in cohort])
    n_obs = int(offsets[-1])
    n_remove = int(np.floor(p * n_obs + 0.5))
    chosen = rng.choice(n_obs, size=n_remove, replace=False) if n_remove else np.array([], dtype=np.int64)
    chosen.sort()
    plan = {}
    for i, s in enumerate(cohort):
        keep = np.ones_like(s.mask)
        lo, hi = offsets[i], offsets[i + 1]
        local = chosen[(chosen >= lo) & (chosen < hi)] - lo
        if local.size:
            obs_t, obs_d = np.nonzero(s.mask)
            keep[obs_t[local], obs_d[local]] = False
        plan[s.subject_id] = keep
    return plan


# --------------------------------------------------------------------------
# Folds
# --------------------------------------------------------------------------

@dataclass
class Fold:
    index: int
    train: list[str]
    val: list[str]
    test: list[str]


def stratified_folds(cohort, k=5, val_frac=0.1, test_frac=0.1, seed=0):
    """Per-class rotating validation/test blocks keyed on the baseline label.

    Subjects without an observed baseline label always land in training.
    """
    if k < 2:
        raise ValueError("k must be at least 2")
    if not (0 <= val_frac and 0 <= test_frac and val_frac + test_frac < 1):
        raise ValueError("val_frac + test_frac must be below 1")
    rng = np.random.default_rng(seed)
    by_class: dict[int, list[str]] = {}
    unlabeled = []
    for s in cohort:
        b = s.baseline_label
        if b is None:
            unlabeled.append(s.subject_id)
        else:
            by_class.setdefault(b, []).append(s.subject_id)

    perms = {}
    for c in sorted(by_class):
        ids = by_class[c]
        if len(ids) < k:
            warnings.warn(f"class {LABELS[c]} has {len(ids)} subjects, fewer than k={k}; "
                          "stratification is best-effort", stacklevel=2)
        perms[c] = [ids[i] for i in rng.permutation(len(ids))]

    folds = []
    for f in range(k):
        train, val, test = [], [], []
        for c, ids in perms.items():
            n = len(ids)
            n_test = int(np.floor(test_frac * n + 0.5))
            n_val = int(np.floor(val_frac * n + 0.5))
            start = (f * n_test) % n if n else 0
            rotated = ids[start:] + ids[:start]
            test += rotated[:n_test]
            val += rotated[n_test:n_test + n_val]
            train += rotated[n_test + n_val:]
        train += unlabeled
        folds.append(Fold(f, train, val, test))
    return folds


# --------------------------------------------------------------------------
# Synthetic cohorts
# --------------------------------------------------------------------------

# Latent classes: stable (CN-like), slow (MCI-like) and fast progressors.
_CLASS_SEVERITY = ((0.0, 0.7), (1.05, 1.7), (1.3, 2.4))
_CLASS_RATE = ((0.0, 0.12), (0.02, 0.12), (0.15, 0.35))


def _severity_label(sev):
    return np.where(sev < 1.0, 0, np.where(sev < 2.0, 1, 2))


def synthesize_cohort(n_subjects=200, T=11, D_mri=6, D_cog=3, missing_frac=0.3, seed=0,
                      noise=0.05, visit_interval=1.0):
    """Generate a cohort with known complete values.

    A latent severity grows linearly in time at a class-dependent rate.
    MRI-like channel 0 grows with severity, the others shrink; cognitive
    channels are monotone (alternately decreasing and increasing) in
    severity.  Labels follow severity thresholds (<1 CN, <2 MCI, else AD), so
    they never reverse.  Exactly ``round(missing_frac * N)`` feature entries
    are hidden, uniformly over the cohort.
    """
    if min(n_subjects, T, D_mri + D_cog) <= 0 or D_mri < 0 or D_cog < 0:
        raise ValueError("counts must be positive")
    if not 0.0 <= missing_frac < 1.0:
        raise ValueError("missing_frac must be in [0, 1)")
    rng = np.random.default_rng(seed)
    D = D_mri + D_cog
    times = np.arange(T) * float(visit_interval)

    # per-channel baselines and severity loadings in raw units
    mri_base = rng.uniform(2.0, 40.0, size=D_mri)
    mri_load = -rng.uniform(0.06, 0.12, size=D_mri) * mri_base
    if D_mri:
        mri_load[0] = rng.uniform(0.25, 0.4) * mri_base[0]
    cog_sign = np.array([-1.0 if j % 2 == 0 else 1.0 for j in range(D_cog)])
    cog_scale = rng.uniform(8.0, 20.0, size=D_cog)
    cog_base = np.where(cog_sign < 0, 30.0, 5.0) + rng.uniform(0, 2, size=D_cog)

    latent = np.arange(n_subjects) % 3
    rng.shuffle(latent)
    full = np.empty((n_subjects, T, D))
    labels = np.empty((n_subjects, T), dtype=np.int64)
    for n in range(n_subjects):
        c = latent[n]
        s0 = rng.uniform(*_CLASS_SEVERITY[c])
        rate = rng.uniform(*_CLASS_RATE[c])
        sev = s0 + rate * times
        offset = rng.normal(0.0, 0.03, size=D)
        mri = mri_base * (1.0 + offset[:D_mri]) + np.outer(sev, mri_load)
        mri = mri + rng.normal(0.0, noise, size=(T, D_mri)) * np.abs(mri_load)
        # saturating response keeps cognitive scores monotone but non-linear
        resp = np.tanh(sev / 2.0)
        cog = cog_base + np.outer(resp, cog_sign * cog_scale) + offset[D_mri:] * cog_scale
        cog = cog + rng.normal(0.0, noise, size=(T, D_cog)) * cog_scale
        full[n, :, :D_mri] = mri
        full[n, :, D_mri:] = cog
        labels[n] = _severity_label(sev)

    n_total = n_subjects * T * D
    n_hide = int(np.floor(missing_frac * n_total + 0.5))
    mask = np.ones(n_total, dtype=bool)
    if n_hide:
        mask[rng.choice(n_total, size=n_hide, replace=False)] = False
    mask = mask.reshape(n_subjects, T, D)

    width = len(str(n_subjects - 1))
    subjects = []
    for n in range(n_subjects):
        subjects.append(SubjectSequence(
            subject_id=f"S{n:0{width}d}",
            times=times.copy(),
            values=np.where(mask[n], full[n], 0.0),
            mask=mask[n],
            labels=labels[n].copy(),
            label_mask=np.ones(T, dtype=bool),
            truth=full[n].copy(),
            truth_labels=labels[n].copy(),
        ))
    names = [f"mri_{j}" for j in range(D_mri)] + [f"cog_{j}" for j in range(D_cog)]
    kinds = ["MRI"] * D_mri + ["Cog"] * D_cog
    return Cohort(subjects, names, kinds)
