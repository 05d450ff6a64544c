"""Metrics and post-hoc analyses for trained models."""

from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import rankdata

from .cohort import LABEL_INDEX, plan_random_removal
from .heads import N_CLASSES
from .model import make_batch, stack
from .training import fixed_batches

AD = LABEL_INDEX["AD"]


# --------------------------------------------------------------------------
# Regression
# --------------------------------------------------------------------------

def regression_metrics(pred, truth, mask=None):
    """MAE, MRE and RMSE over the entries selected by ``mask``."""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {truth.shape}")
    sel = np.ones(pred.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    err = (pred - truth)[sel]
    if err.size == 0:
        raise ValueError("no entries selected for scoring")
    denom = np.abs(truth[sel]).sum()
    if denom == 0:
        raise ValueError("MRE undefined: scored truth values sum to zero in magnitude")
    return {
        "MAE": float(np.abs(err).mean()),
        "MRE": float(np.abs(err).sum() / denom),
        "RMSE": float(np.sqrt((err ** 2).mean())),
    }


# --------------------------------------------------------------------------
# Classification
# --------------------------------------------------------------------------

def _pair_auc(scores_pos, scores_neg):
    """P(score of a positive > score of a negative), ties counting one half, via midranks."""
    n1, n0 = len(scores_pos), len(scores_neg)
    ranks = rankdata(np.concatenate([scores_pos, scores_neg]))
    return (ranks[:n1].sum() - n1 * (n1 + 1) / 2.0) / (n1 * n0)


def hand_till_mauc(scores, labels, n_classes=None):
    """Multi-class AUC: mean over class pairs of the symmetrised one-vs-one AUC."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    K = scores.shape[1] if n_classes is None else n_classes
    present = [k for k in range(K) if np.any(labels == k)]
    if len(present) < 2:
        raise ValueError("mAUC needs at least two classes among the scored samples")
    missing = [k for k in range(K) if k not in present]
    if missing:
        warnings.warn(f"classes {missing} absent from truth; their pairs are skipped", stacklevel=2)
    total, pairs = 0.0, 0
    for a in range(len(present)):
        for b in range(a + 1, len(present)):
            i, j = present[a], present[b]
            si, sj = scores[labels == i], scores[labels == j]
            a_ij = _pair_auc(si[:, i], sj[:, i])
            a_ji = _pair_auc(sj[:, j], si[:, j])
            total += 0.5 * (a_ij + a_ji)
            pairs += 1
    return total / pairs


def classification_metrics(probs, labels, mask=None):
    """mAUC plus macro precision and recall of the argmax prediction.

    ``probs`` is ``(..., K)``; ``labels`` and ``mask`` share its leading shape.
    """
    probs = np.asarray(probs, dtype=np.float64)
    K = probs.shape[-1]
    labels = np.asarray(labels).reshape(-1)
    probs = probs.reshape(-1, K)
    if mask is not None:
        sel = np.asarray(mask, dtype=bool).reshape(-1)
        probs, labels = probs[sel], labels[sel]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        mauc = hand_till_mauc(probs, labels, K)
    pred = probs.argmax(axis=1)
    classes = sorted(set(labels.tolist()) | set(pred.tolist()))
    prec, rec = [], []
    for k in classes:
        tp = np.sum((pred == k) & (labels == k))
        n_pred = np.sum(pred == k)
        n_true = np.sum(labels == k)
        prec.append(tp / n_pred if n_pred else 0.0)
        rec.append(tp / n_true if n_true else 0.0)
    return {"mAUC": float(mauc), "precision": float(np.mean(prec)), "recall": float(np.mean(rec))}


# --------------------------------------------------------------------------
# Conversion to AD
# --------------------------------------------------------------------------

def conversion_time(path, times, mask=None):
    """Time of the first AD status after a non-AD start, else None."""
    path = np.asarray(path)
    sel = np.ones(len(path), dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    idx = np.flatnonzero(sel)
    if idx.size == 0 or path[idx[0]] == AD:
        return None
    hits = idx[path[idx] == AD]
    return float(times[hits[0]]) if hits.size else None


def conversion_metrics(predicted_paths, true_paths, times, true_masks=None):
    """Accuracy and timing error (years) of predicted conversion to AD.

    Only subjects whose true path starts outside AD and reaches it are scored.
    A converter whose predicted path never reaches AD counts as incorrect and
    is left out of the timing error.
    """
    n_conv, n_hit, errors = 0, 0, []
    for n, (pred, true) in enumerate(zip(predicted_paths, true_paths)):
        t = times[n] if np.ndim(times) > 1 or isinstance(times, list) else times
        tm = None if true_masks is None else true_masks[n]
        t_true = conversion_time(true, t, tm)
        if t_true is None:
            continue
        n_conv += 1
        hits = np.flatnonzero(np.asarray(pred) == AD)
        if hits.size:
            n_hit += 1
            errors.append(abs(float(t[hits[0]]) - t_true))
    if n_conv == 0:
        return {"accuracy": None, "MAE_years": None, "n_converters": 0}
    return {"accuracy": n_hit / n_conv, "MAE_years": float(np.mean(errors)) if errors else None,
            "n_converters": n_conv}


# --------------------------------------------------------------------------
# Cell-state analysis
# --------------------------------------------------------------------------

def point_biserial(values, indicator):
    """Point-biserial correlation; 0 when either variable is constant."""
    x = np.asarray(values, dtype=np.float64)
    b = np.asarray(indicator).astype(bool)
    n = x.size
    n1 = b.sum()
    sd = x.std()
    if n1 == 0 or n1 == n or sd == 0:
        return 0.0
    p = n1 / n
    return float((x[b].mean() - x[~b].mean()) / sd * math.sqrt(p * (1.0 - p)))


def transition_group(path, mask=None):
    """Classify a status path as 'CN-MCI', 'MCI-AD', 'CN-MCI-AD' or None (no conversion)."""
    path = np.asarray(path)
    if mask is not None:
        path = path[np.asarray(mask, dtype=bool)]
    seen = []
    for s in path.tolist():
        if not seen or seen[-1] != s:
            seen.append(s)
    key = tuple(seen)
    return {(0, 1): "CN-MCI", (1, 2): "MCI-AD", (0, 1, 2): "CN-MCI-AD"}.get(key)


def conversion_indicator(path, mask=None):
    """1 from the first visit showing the path's final status onward, 0 before."""
    path = np.asarray(path)
    sel = np.ones(len(path), dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    idx = np.flatnonzero(sel)
    out = np.zeros(len(path), dtype=np.int64)
    if idx.size:
        final = path[idx[-1]]
        first = idx[path[idx] == final][0]
        out[first:] = 1
    return out


def cell_state_analysis(cell_traces, indicators, groups, top_frac=0.25, pooled=True):
    """Rank cell units by their correlation with status conversion, per group.

    Parameters
    ----------
    cell_traces : list of (T_n, H) arrays
    indicators : list of (T_n,) 0/1 arrays
    groups : list of group tags (subjects tagged None are ignored)
    top_frac : fraction of units flagged per group, by |normalized coefficient|
    pooled : correlate over all visits of the group at once; otherwise average
        per-subject coefficients

    Returns
    -------
    rows : list of dicts (unit, group, coefficient, normalized, flagged)
    common : sorted units flagged in every group
    """
    tags = sorted({g for g in groups if g is not None})
    rows, flagged_sets = [], []
    for tag in tags:
        members = [n for n, g in enumerate(groups) if g == tag]
        if len(members) < 2:
            warnings.warn(f"group {tag} has fewer than two subjects", stacklevel=2)
        H = cell_traces[members[0]].shape[1]
        if pooled:
            X = np.concatenate([cell_traces[n] for n in members])
            b = np.concatenate([indicators[n] for n in members])
            coef = np.array([point_biserial(X[:, u], b) for u in range(H)])
        else:
            per = [[point_biserial(cell_traces[n][:, u], indicators[n]) for u in range(H)]
                   for n in members if 0 < np.sum(indicators[n]) < len(indicators[n])]
            coef = np.mean(per, axis=0) if per else np.zeros(H)
        sd = coef.std()
        norm = coef / sd if sd > 0 else coef.copy()
        n_top = max(1, int(math.ceil(top_frac * H)))
        order = np.argsort(-np.abs(norm), kind="stable")
        top = set(order[:n_top].tolist())
        flagged_sets.append(top)
        for u in order:
            rows.append({"unit": int(u), "group": tag, "coefficient": float(coef[u]),
                         "normalized": float(norm[u]), "flagged": u in top})
    common = sorted(set.intersection(*flagged_sets)) if flagged_sets else []
    return rows, common


# --------------------------------------------------------------------------
# Relative change trajectories
# --------------------------------------------------------------------------

def relative_change(traj_pred, traj_true, baseline):
    """Relative change from baseline for predicted and true trajectories.

    Both curves are scaled jointly by their largest absolute change, so the
    output lies in [-1, 1] and keeps the sign (increase vs decrease).
    Features with a zero baseline are dropped with a warning.

    Returns dict with ``features`` (kept indices), ``raw_pred``, ``raw_true``,
    ``pred`` and ``true`` (normalized), each ``(T, F_kept)``.
    """
    traj_pred = np.asarray(traj_pred, dtype=np.float64)
    traj_true = np.asarray(traj_true, dtype=np.float64)
    baseline = np.asarray(baseline, dtype=np.float64)
    keep = np.flatnonzero(baseline != 0)
    if keep.size < baseline.size:
        warnings.warn(f"zero baseline for features {np.flatnonzero(baseline == 0).tolist()}; skipped",
                      stacklevel=2)
    b = baseline[keep]
    r_p = (traj_pred[:, keep] - b) / b
    r_g = (traj_true[:, keep] - b) / b
    scale = max(np.abs(r_p).max(initial=0.0), np.abs(r_g).max(initial=0.0))
    if scale == 0:
        scale = 1.0
    return {"features": keep, "raw_pred": r_p, "raw_true": r_g, "pred": r_p / scale, "true": r_g / scale}


# --------------------------------------------------------------------------
# Baseline imputers
# --------------------------------------------------------------------------

def feature_means(cohort, keep=None):
    D = cohort.n_features
    s, n = np.zeros(D), np.zeros(D)
    for subj in cohort:
        m = subj.mask if keep is None else subj.mask & keep[subj.subject_id]
        s += np.where(m, subj.values, 0.0).sum(axis=0)
        n += m.sum(axis=0)
    return np.divide(s, n, out=np.zeros(D), where=n > 0)


def baseline_imputers(cohort, kind, keep=None, train_means=None):
    """Fill every entry not shown to the model (missing or removed).

    ``kind`` is ``"mean"`` (training means), ``"forward"`` (last shown value,
    training mean before the first one) or ``"zero"``.  Returns
    ``{subject_id: (T, D) filled values}``.
    """
    if kind not in ("mean", "forward", "zero"):
        raise ValueError(f"unknown baseline imputer {kind!r}")
    means = feature_means(cohort, keep) if train_means is None else np.asarray(train_means)
    out = {}
    for s in cohort:
        m = s.mask if keep is None else s.mask & keep[s.subject_id]
        x = np.where(m, s.values, 0.0)
        if kind == "zero":
            filled = x
        elif kind == "mean":
            filled = np.where(m, x, means)
        else:
            filled = x.copy()
            last = means.copy()
            for t in range(s.n_visits):
                filled[t] = np.where(m[t], x[t], last)
                last = filled[t]
        out[s.subject_id] = filled
    return out


# --------------------------------------------------------------------------
# Model evaluation
# --------------------------------------------------------------------------

def predict_status(model, cohort, keep=None, batch_size=256):
    """Per-visit status probabilities for every subject, concatenated.

    Returns ``(probs (N, K), labels (N,), mask (N,))``.
    """
    P, Y, M = [], [], []
    for group in fixed_batches(cohort.subjects, batch_size):
        batch = make_batch(group, keep, model.time_scale)
        traces = model.unroll(batch)
        probs = np.stack([tr.out.probs for tr in traces], axis=1)
        P.append(probs.reshape(-1, probs.shape[-1]))
        Y.append(batch.y.reshape(-1))
        M.append(batch.my.reshape(-1) > 0)
    return np.concatenate(P), np.concatenate(Y), np.concatenate(M)


def model_imputations(model, cohort, keep, batch_size=256):
    """Completed observations ``u_c`` for every subject, ``{subject_id: (T, D)}``."""
    out = {}
    for group in fixed_batches(cohort.subjects, batch_size):
        batch = make_batch(group, keep, model.time_scale)
        u_c = stack(model.unroll(batch), "u_c")
        for sid, u in zip(batch.ids, u_c):
            out[sid] = u
    return out


def hidden_entry_scores(cohort, filled, keep):
    """MAE/MRE of ``filled`` against true values on entries hidden by ``keep``."""
    pred, truth = [], []
    for s in cohort:
        hid = s.mask & ~keep[s.subject_id]
        pred.append(filled[s.subject_id][hid])
        truth.append(s.values[hid])
    pred, truth = np.concatenate(pred), np.concatenate(truth)
    m = regression_metrics(pred, truth)
    return {"MAE": m["MAE"], "MRE": m["MRE"], "n": int(pred.size)}


def compare_imputers(model, test, train=None, removal=0.1, seed=0):
    """Table of hidden-entry MAE/MRE for the model and the three baselines."""
    keep = plan_random_removal(test, removal, seed)
    means = feature_means(train if train is not None else test)
    table = {}
    for kind in ("mean", "forward", "zero"):
        table[kind] = hidden_entry_scores(test, baseline_imputers(test, kind, keep, means), keep)
    if model is not None:
        table["model"] = hidden_entry_scores(test, model_imputations(model, test, keep), keep)
    return table


def rollout_batch(model, batch, prefix_len, horizon, visit_interval=1.0):
    """Batched rollout; returns future status probabilities ``(B, horizon, K)``."""
    B = batch.size
    h, c = model.initial_state(B)
    tr = None
    for t in range(prefix_len):
        tr = model.step(h, c, batch.x[:, t], batch.m[:, t], batch.delta[:, t])
        h, c = tr.h, tr.c
    m_prev, d_prev = batch.m[:, prefix_len - 1], batch.delta[:, prefix_len - 1]
    out = tr.out
    probs = []
    gap = visit_interval * model.time_scale
    for _ in range(horizon):
        d_t = np.where(m_prev > 0, gap, gap + d_prev)
        fed = model.assemble(out.mri, out.cog)
        m_t = np.zeros_like(fed)
        tr = model.step(h, c, fed, m_t, d_t)
        out = tr.out
        probs.append(out.probs)
        h, c, m_prev, d_prev = tr.h, tr.c, m_t, d_t
    return np.stack(probs, axis=1) if probs else np.zeros((B, 0, N_CLASSES))


def rollout_mauc(model, cohort, horizon, visit_interval=1.0, batch_size=256):
    """mAUC of status predicted ``horizon`` visits past every possible prefix."""
    P_all, Y_all = [], []
    for group in fixed_batches(cohort.subjects, batch_size):
        batch = make_batch(group, None, model.time_scale)
        for P in range(1, batch.T - horizon + 1):
            probs = rollout_batch(model, batch, P, horizon, visit_interval)[:, -1]
            t = P + horizon - 1
            sel = batch.my[:, t] > 0
            P_all.append(probs[sel])
            Y_all.append(batch.y[sel, t])
    if not P_all:
        return float("nan")
    try:
        return classification_metrics(np.concatenate(P_all), np.concatenate(Y_all))["mAUC"]
    except ValueError:
        return float("nan")


def predicted_paths(model, cohort, prefix_len=1, visit_interval=1.0, batch_size=256):
    """Argmax status paths over each subject's visit grid from a ``prefix_len`` prefix."""
    paths = {}
    for group in fixed_batches(cohort.subjects, batch_size):
        batch = make_batch(group, None, model.time_scale)
        P = min(prefix_len, batch.T)
        traces = model.unroll(batch)
        pre = np.stack([tr.out.probs for tr in traces[:P]], axis=1)
        fut = rollout_batch(model, batch, P, batch.T - P, visit_interval)
        full = np.concatenate([pre, fut], axis=1).argmax(axis=-1)
        for sid, path in zip(batch.ids, full):
            paths[sid] = path
    return paths


@dataclass
class MetricReport:
    imputation: dict = field(default_factory=dict)
    mri_mae: dict = field(default_factory=dict)
    cog_rmse: dict = field(default_factory=dict)
    classification: dict = field(default_factory=dict)
    conversion: dict = field(default_factory=dict)
    rollout_mauc: dict = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)

    def flat(self):
        row = {}
        for k, v in self.imputation.items():
            row[f"imputation_{k}"] = v
        for k, v in self.mri_mae.items():
            row[f"MAE_{k}"] = v
        for k, v in self.cog_rmse.items():
            row[f"RMSE_{k}"] = v
        row.update(self.classification)
        for k, v in self.conversion.items():
            row[f"conversion_{k}"] = v
        for k, v in self.rollout_mauc.items():
            row[f"mAUC_h{k}"] = v
        return row

    def to_dict(self):
        return asdict(self)


def evaluate_model(model, cohort, removal=0.1, seed=0, horizons=(1, 5), conversion_prefix=1,
                   visit_interval=1.0, feature_names=None):
    """Every metric of a model on a (normalized) cohort split."""
    names = feature_names or [f"f{d}" for d in range(model.D)]
    report = MetricReport()

    keep = plan_random_removal(cohort, removal, seed)
    if removal > 0:
        report.imputation = hidden_entry_scores(cohort, model_imputations(model, cohort, keep), keep)

    preds, truth, masks = [], [], []
    for group in fixed_batches(cohort.subjects, 256):
        batch = make_batch(group, None, model.time_scale)
        traces = model.unroll(batch)
        fc = model.assemble(np.stack([tr.out.mri for tr in traces], axis=1),
                            np.stack([tr.out.cog for tr in traces], axis=1))
        preds.append(fc[:, :-1].reshape(-1, model.D))
        truth.append(batch.x_true[:, 1:].reshape(-1, model.D))
        masks.append(batch.m_true[:, 1:].reshape(-1, model.D) > 0)
    if preds:
        pred, tru, msk = np.concatenate(preds), np.concatenate(truth), np.concatenate(masks)
        for d in range(model.D):
            if not msk[:, d].any():
                continue
            e = pred[msk[:, d], d] - tru[msk[:, d], d]
            if d in model.mri_index:
                report.mri_mae[names[d]] = float(np.abs(e).mean())
            else:
                report.cog_rmse[names[d]] = float(np.sqrt((e ** 2).mean()))

    probs, labels, lmask = predict_status(model, cohort)
    try:
        report.classification = classification_metrics(probs, labels, lmask)
    except ValueError:
        report.classification = {"mAUC": float("nan"), "precision": float("nan"), "recall": float("nan")}

    paths = predicted_paths(model, cohort, conversion_prefix, visit_interval)
    subjects = list(cohort)
    report.conversion = conversion_metrics([paths[s.subject_id] for s in subjects],
                                           [s.labels for s in subjects],
                                           [s.times for s in subjects],
                                           [s.label_mask for s in subjects])
    for h in horizons:
        report.rollout_mauc[str(h)] = rollout_mauc(model, cohort, h, visit_interval)
    return report


def summarize_reports(reports):
    """Mean and population std of every numeric metric across reports."""
    rows = [r.flat() for r in reports]
    keys = []
    for row in rows:
        keys += [k for k in row if k not in keys]
    summary = {}
    for k in keys:
        vals = [row.get(k) for row in rows]
        vals = [v for v in vals if isinstance(v, (int, float)) and v is not None and np.isfinite(v)]
        if vals:
            summary[k] = (float(np.mean(vals)), float(np.std(vals)))
    return summary
