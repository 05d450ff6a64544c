"""Composite loss, optimization, early stopping, cross-validation and checkpoints."""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .cohort import (NormalizationSpec, fit_and_apply_normalizer, plan_random_removal,
                     stratified_folds)
from .model import ProgressionModel, make_batch, stack

log = logging.getLogger(__name__)

FORMAT_VERSION = "adprog-checkpoint/1"


@dataclass
class LossWeights:
    alpha: float = 0.1     # imputation
    zeta: float = 0.5      # MRI + cognitive forecasting
    xi: float = 0.5        # status classification
    epsilon: float = 5.0   # focal exponent

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"{f.name} must be finite and non-negative, got {v}")


@dataclass
class TrainConfig:
    learning_rate: float = 5e-3
    batch_size: int = 64
    epochs: int = 300
    l2: float = 1e-4
    hidden: int = 64
    seed: int = 0
    patience: int = 30
    removal: float = 0.1
    time_scale: float = 1.0
    visit_interval: float = 1.0
    normalize_losses: bool = True
    imputation_target: str = "removed"   # or "literal"
    resample_removal: bool = True
    folds: int = 5
    val_frac: float = 0.1
    test_frac: float = 0.1
    fold: int = 0

    def __post_init__(self):
        for name in ("learning_rate", "time_scale", "visit_interval"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        for name in ("batch_size", "hidden"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be at least 1")
        for name in ("epochs", "patience", "l2"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if not 0 <= self.removal < 1:
            raise ValueError("removal must be in [0, 1)")
        if self.imputation_target not in ("removed", "literal"):
            raise ValueError("imputation_target must be 'removed' or 'literal'")


# --------------------------------------------------------------------------
# Losses.  Each returns (value, gradient(s) w.r.t. its prediction inputs).
# --------------------------------------------------------------------------

def loss_imputation(x_hat, z_hat, u_hat, x_true, m_true, keep, target="removed", normalize=True):
    """Sum of absolute errors of the three estimates on the scored entries.

    ``target="removed"`` scores entries that were observed but hidden by the
    removal mask ``keep`` against their true values.  ``target="literal"``
    scores every entry not shown to the model against ``x * m_eff`` (zero
    where hidden).
    """
    m_true = np.asarray(m_true, dtype=np.float64)
    keep = np.asarray(keep, dtype=np.float64)
    if target == "removed":
        sel = m_true * (1.0 - keep)
        x_tgt = x_true * m_true
    elif target == "literal":
        m_eff = m_true * keep
        sel = 1.0 - m_eff
        x_tgt = x_true * m_eff
    else:
        raise ValueError(f"unknown imputation target {target!r}")
    n = sel.sum()
    scale = 1.0 / n if (normalize and n > 0) else 1.0
    total = 0.0
    grads = []
    for est in (x_hat, z_hat, u_hat):
        r = (x_tgt - est) * sel
        total += np.abs(r).sum()
        grads.append(-np.sign(r) * sel * scale)
    return total * scale, tuple(grads)


def loss_forecast(pred, x_true, m_true, normalize=True):
    """Squared error of next-visit forecasts on observed next-visit entries.

    ``pred[:, t]`` forecasts visit ``t + 1``; the last forecast is unscored.
    """
    T = pred.shape[1]
    grad = np.zeros_like(pred)
    if T < 2:
        warnings.warn("forecast loss needs at least two visits; returning 0", stacklevel=2)
        return 0.0, grad
    m_next = m_true[:, 1:]
    r = (pred[:, :-1] - x_true[:, 1:]) * m_next
    n = m_next.sum()
    scale = 1.0 / n if (normalize and n > 0) else 1.0
    grad[:, :-1] = 2.0 * r * scale
    return float((r ** 2).sum() * scale), grad


def _focal_terms(probs, onehot, eps):
    p = np.clip(probs, 1e-300, 1.0)
    one_m = np.clip(1.0 - probs, 0.0, None)
    logp = np.log(p)
    w = one_m ** eps
    value = -(onehot * w * logp).sum(axis=-1)
    if eps == 0:
        dw = np.zeros_like(p)
    else:
        dw = -eps * np.clip(one_m, 1e-300, None) ** (eps - 1.0)
    # d value / d p_k
    d_p = -onehot * (dw * logp + w / p)
    return value, d_p


def loss_focal(probs, y, my, epsilon=5.0, normalize=True):
    """Focal cross-entropy on labelled visits ``t < T``; gradient w.r.t. logits."""
    if epsilon < 0:
        raise ValueError("epsilon must be non-negative")
    probs = np.asarray(probs, dtype=np.float64)
    if np.any(probs <= 0):
        raise ValueError("probabilities must be strictly positive")
    B, T, K = probs.shape
    score = np.asarray(my, dtype=np.float64).copy()
    score[:, T - 1] = 0.0
    onehot = np.eye(K)[y]
    value, d_p = _focal_terms(probs, onehot, epsilon)
    n = score.sum()
    scale = 1.0 / n if (normalize and n > 0) else 1.0
    d_p = d_p * (score * scale)[..., None]
    # softmax vector-Jacobian product
    d_logits = probs * (d_p - (d_p * probs).sum(axis=-1, keepdims=True))
    return float((value * score).sum() * scale), d_logits


def cross_entropy(probs, y, my, normalize=True):
    """Plain cross-entropy scored the same way as :func:`loss_focal`."""
    probs = np.asarray(probs, dtype=np.float64)
    B, T, K = probs.shape
    score = np.asarray(my, dtype=np.float64).copy()
    score[:, T - 1] = 0.0
    nll = -np.log(np.take_along_axis(probs, y[..., None], axis=-1)[..., 0])
    n = score.sum()
    scale = 1.0 / n if (normalize and n > 0) else 1.0
    return float((nll * score).sum() * scale)


def l2_penalty(params, coef):
    return coef * sum(float((params[n] ** 2).sum()) for n in params.weight_names())


def loss_total(components, weights, params=None, l2=0.0):
    value = (weights.alpha * components["imputation"]
             + weights.zeta * (components["mri"] + components["cog"])
             + weights.xi * components["focal"])
    if params is not None and l2:
        value += l2_penalty(params, l2)
    return value


def composite_loss(model, batch, weights, l2=0.0, normalize=True, target="removed", grad=True):
    """Forward ``batch``, compute every loss term and (optionally) backpropagate.

    Gradients are written into ``model.params.grads`` (zeroed first).
    Returns ``(total, components)``.
    """
    traces = model.unroll(batch)
    keep = 1.0 - batch.removed
    x_hat, z_hat, u_hat = stack(traces, "x_hat"), stack(traces, "z_hat"), stack(traces, "u_hat")
    l_imp, (g_xh, g_zh, g_uh) = loss_imputation(x_hat, z_hat, u_hat, batch.x_true, batch.m_true, keep,
                                                target=target, normalize=normalize)
    mri_pred = np.stack([tr.out.mri for tr in traces], axis=1)
    cog_pred = np.stack([tr.out.cog for tr in traces], axis=1)
    mi, ci = model.mri_index, model.cog_index
    l_mri, g_mri = loss_forecast(mri_pred, batch.x_true[..., mi], batch.m_true[..., mi], normalize)
    l_cog, g_cog = loss_forecast(cog_pred, batch.x_true[..., ci], batch.m_true[..., ci], normalize)
    probs = np.stack([tr.out.probs for tr in traces], axis=1)
    l_y, g_logits = loss_focal(probs, batch.y, batch.my, weights.epsilon, normalize)
    comps = {"imputation": l_imp, "mri": l_mri, "cog": l_cog, "focal": l_y}
    total = loss_total(comps, weights, model.params, l2)
    if grad:
        p = model.params
        p.zero_grad()
        a, z, xi = weights.alpha, weights.zeta, weights.xi
        model.backward(traces, d_x_hat=a * g_xh, d_z_hat=a * g_zh, d_u_hat=a * g_uh,
                       d_mri=z * g_mri, d_cog=z * g_cog, d_logits=xi * g_logits)
        if l2:
            for n in p.weight_names():
                p.accumulate(n, 2.0 * l2 * p[n])
    return total, comps


# --------------------------------------------------------------------------
# Optimizer
# --------------------------------------------------------------------------

class Adam:
    def __init__(self, params, lr=5e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {n: np.zeros_like(v) for n, v in params.values.items()}
        self.v = {n: np.zeros_like(v) for n, v in params.values.items()}
        self.t = 0

    def step(self):
        for n, g in self.params.grads.items():
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient in {n}")
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for n, g in self.params.grads.items():
            self.m[n] = self.beta1 * self.m[n] + (1.0 - self.beta1) * g
            self.v[n] = self.beta2 * self.v[n] + (1.0 - self.beta2) * g * g
            m_hat = self.m[n] / bc1
            v_hat = self.v[n] / bc2
            self.params.values[n] -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
        self.params.project()
        self.params.check_constraints()


def adam_update(params, optimizer=None, lr=5e-3, beta1=0.9, beta2=0.999, eps_adam=1e-8):
    """One Adam step on ``params`` using its gradient buffers; returns the optimizer."""
    if optimizer is None:
        optimizer = Adam(params, lr, beta1, beta2, eps_adam)
    optimizer.step()
    return optimizer


# --------------------------------------------------------------------------
# Checkpoints
# --------------------------------------------------------------------------

@dataclass
class Checkpoint:
    config: dict
    feature_names: list[str]
    feature_kinds: list[str]
    params: dict
    normalization: dict | None = None
    best_val_mauc: float | None = None
    best_epoch: int = 0
    format_version: str = FORMAT_VERSION

    def to_json(self):
        obj = {
            "format_version": self.format_version,
            "config": self.config,
            "feature_names": self.feature_names,
            "feature_kinds": self.feature_kinds,
            "normalization": self.normalization,
            "best_val_mauc": self.best_val_mauc,
            "best_epoch": self.best_epoch,
            "params": {n: {"shape": list(v.shape), "values": [float(x) for x in v.reshape(-1)]}
                       for n, v in self.params.items()},
        }
        return json.dumps(obj, sort_keys=True, indent=1, allow_nan=False) + "\n"

    @classmethod
    def from_json(cls, text):
        obj = json.loads(text)
        if obj.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint format {obj.get('format_version')!r}")
        params = {n: np.array(p["values"], dtype=np.float64).reshape(p["shape"])
                  for n, p in obj["params"].items()}
        return cls(obj["config"], obj["feature_names"], obj["feature_kinds"], params,
                   obj["normalization"], obj["best_val_mauc"], obj["best_epoch"], obj["format_version"])

    def save(self, path):
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(self.to_json())

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(fh.read())

    def train_config(self):
        return TrainConfig(**self.config)

    def normalization_spec(self):
        return NormalizationSpec.from_dict(self.normalization) if self.normalization else None

    def build_model(self):
        cfg = self.train_config()
        model = ProgressionModel(self.feature_kinds, hidden=cfg.hidden, seed=cfg.seed, time_scale=cfg.time_scale)
        model.params.load_values(self.params)
        return model


# --------------------------------------------------------------------------
# Training loop
# --------------------------------------------------------------------------

def iter_batches(subjects, batch_size, rng):
    """Group subjects by sequence length, shuffle within groups, then shuffle batch order."""
    groups: dict[int, list] = {}
    for s in subjects:
        groups.setdefault(s.n_visits, []).append(s)
    batches = []
    for T in sorted(groups):
        members = groups[T]
        order = rng.permutation(len(members))
        for lo in range(0, len(members), batch_size):
            batches.append([members[i] for i in order[lo:lo + batch_size]])
    return [batches[i] for i in rng.permutation(len(batches))]


def fixed_batches(subjects, batch_size):
    groups: dict[int, list] = {}
    for s in subjects:
        groups.setdefault(s.n_visits, []).append(s)
    return [groups[T][lo:lo + batch_size] for T in sorted(groups) for lo in range(0, len(groups[T]), batch_size)]


def _seed(*parts):
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


def dataset_loss(model, cohort, weights, config, keep):
    """Subject-weighted mean composite loss over ``cohort`` without gradients."""
    total, n = 0.0, 0
    for group in fixed_batches(cohort.subjects, config.batch_size):
        batch = make_batch(group, keep, config.time_scale)
        value, _ = composite_loss(model, batch, weights, config.l2, config.normalize_losses,
                                  config.imputation_target, grad=False)
        total += value * batch.size
        n += batch.size
    return float(total / max(n, 1))


def train_model(train, val, config=None, weights=None, normalization=None, log_every=0):
    """Train on ``train`` (normalized cohort), early-stopping on validation mAUC.

    The best snapshot is the one with the highest validation mAUC; ties go to
    the lower validation loss.  Returns ``(Checkpoint, history)`` where
    ``history`` is a list of per-epoch dicts (epoch 0 is the initialization).
    """
    from .evaluation import predict_status, classification_metrics

    config = config or TrainConfig()
    weights = weights or LossWeights()
    if len(train) == 0 or len(val) == 0:
        raise ValueError("training and validation splits must be non-empty")
    model = ProgressionModel(train.feature_kinds, hidden=config.hidden, seed=config.seed,
                             time_scale=config.time_scale)
    opt = Adam(model.params, lr=config.learning_rate)
    rng = np.random.default_rng(_seed(config.seed, 1))
    val_keep = plan_random_removal(val, config.removal, _seed(config.seed, 2))
    fixed_train_keep = plan_random_removal(train, config.removal, _seed(config.seed, 3))

    def val_scores():
        probs, labels, mask = predict_status(model, val)
        try:
            mauc = classification_metrics(probs, labels, mask)["mAUC"]
        except ValueError:
            mauc = float("nan")
        return mauc, dataset_loss(model, val, weights, config, val_keep)

    mauc, vloss = val_scores()
    history = [{"epoch": 0, "train_loss": dataset_loss(model, train, weights, config, fixed_train_keep),
                "val_loss": vloss, "val_mauc": mauc, "improved": True}]
    best = (mauc if np.isfinite(mauc) else -np.inf, -vloss)
    best_values = {n: v.copy() for n, v in model.params.values.items()}
    best_epoch, stale = 0, 0

    for epoch in range(1, config.epochs + 1):
        keep = (plan_random_removal(train, config.removal, _seed(config.seed, 4, epoch))
                if config.resample_removal else fixed_train_keep)
        losses, sizes = [], []
        for group in iter_batches(train.subjects, config.batch_size, rng):
            batch = make_batch(group, keep, config.time_scale)
            value, _ = composite_loss(model, batch, weights, config.l2, config.normalize_losses,
                                      config.imputation_target)
            opt.step()
            losses.append(value)
            sizes.append(batch.size)
        mauc, vloss = val_scores()
        score = (mauc if np.isfinite(mauc) else -np.inf, -vloss)
        improved = score > best
        if improved:
            best, best_epoch, stale = score, epoch, 0
            best_values = {n: v.copy() for n, v in model.params.values.items()}
        else:
            stale += 1
        history.append({"epoch": epoch, "train_loss": float(np.average(losses, weights=sizes)),
                        "val_loss": vloss, "val_mauc": mauc, "improved": improved})
        if log_every and epoch % log_every == 0:
            log.info("epoch %d loss %.5f val_loss %.5f val_mAUC %.4f", epoch, history[-1]["train_loss"], vloss, mauc)
        if stale > config.patience:
            break

    ckpt = Checkpoint(
        config=asdict(config),
        feature_names=list(train.feature_names),
        feature_kinds=list(train.feature_kinds),
        params=best_values,
        normalization=normalization.to_dict() if normalization is not None else None,
        best_val_mauc=None if not np.isfinite(best[0]) else float(best[0]),
        best_epoch=best_epoch,
    )
    return ckpt, history


def prepare_fold(cohort, fold):
    """Fit normalization on the fold's training subjects and apply it to all three splits."""
    train_raw = cohort.subset(fold.train)
    _, spec = fit_and_apply_normalizer(train_raw)
    normed, _ = fit_and_apply_normalizer(cohort, spec=spec)
    return normed.subset(fold.train), normed.subset(fold.val), normed.subset(fold.test), spec


def cross_validate(cohort, k=5, config=None, weights=None, eval_kwargs=None):
    """Train and evaluate on each of ``k`` stratified folds.

    Returns ``(reports, summary, checkpoints)``; ``summary`` maps each metric
    to ``(mean, std)`` over folds.
    """
    from .evaluation import evaluate_model, summarize_reports

    config = config or TrainConfig()
    weights = weights or LossWeights()
    folds = stratified_folds(cohort, k, config.val_frac, config.test_frac, config.seed)
    reports, ckpts = [], []
    for fold in folds:
        cfg = TrainConfig(**{**asdict(config), "fold": fold.index, "folds": k})
        train, val, test, spec = prepare_fold(cohort, fold)
        ckpt, _ = train_model(train, val, cfg, weights, normalization=spec)
        model = ckpt.build_model()
        rep = evaluate_model(model, test, removal=cfg.removal, seed=_seed(cfg.seed, 5, fold.index),
                             visit_interval=cfg.visit_interval, **(eval_kwargs or {}))
        rep.provenance = {"fold": fold.index, "split": "test", "seed": cfg.seed}
        reports.append(rep)
        ckpts.append(ckpt)
    return reports, summarize_reports(reports), ckpts
