"""Downstream statistical analyses over subject-level feature tables.

Feature extraction itself is out of scope; these routines consume a table of
named volumetric features with age, scanner id, and an optional diagnosis
label, and quantify how harmonization changes predictive power and
inter-scanner variability.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import pandas as pd
import torch
from scipy import optimize
from torch import nn
import torch.nn.functional as F

from .errors import ConfigError, ConvergenceError, DomainError
from .volume import Volume


def load_feature_table(path, required=("scanner_id",)) -> pd.DataFrame:
    table = pd.read_csv(path)
    missing = [c for c in required if c not in table.columns]
    if missing:
        raise ConfigError(f"feature table missing columns: {missing}")
    return table


def _check_used_columns(table: pd.DataFrame, cols) -> None:
    sub = table[list(cols)]
    if sub.isna().any().any():
        bad = sub.columns[sub.isna().any()].tolist()
        raise DomainError(f"missing values in used columns: {bad}")


# ---------------------------------------------------------------------------
# Age prediction with k-fold cross-validation
# ---------------------------------------------------------------------------


def _ols_fit(x: np.ndarray, y: np.ndarray, ridge: float = 1e-8) -> np.ndarray:
    """Least squares with intercept column already present; ridge fallback when rank-deficient."""
    beta, _, rank, _ = np.linalg.lstsq(x, y, rcond=None)
    if rank < x.shape[1]:
        warnings.warn("rank-deficient design; falling back to ridge", stacklevel=2)
        beta = np.linalg.solve(x.T @ x + ridge * np.eye(x.shape[1]), x.T @ y)
    return beta


def linear_bic(rss: float, n: int, p: int) -> float:
    """Concentrated Gaussian BIC: n*ln(RSS/n) + p*ln(n)."""
    return float(n * np.log(rss / n) + p * np.log(n))


def fit_age_lm_cv(table: pd.DataFrame, feature_cols, target: str = "age", k: int = 10, seed: int = 0) -> dict:
    """Out-of-fold R2/RMSE plus training-fit BIC over k folds.

    Features are standardized per fold using training-split statistics only.
    """
    feature_cols = list(feature_cols)
    _check_used_columns(table, feature_cols + [target])
    x_all = table[feature_cols].to_numpy(dtype=np.float64)
    y_all = table[target].to_numpy(dtype=np.float64)
    n = len(y_all)
    if n < k:
        raise ConfigError(f"need at least k={k} rows, got {n}")
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    folds = np.array_split(order, k)

    r2s, rmses, bics = [], [], []
    for fold in folds:
        test_mask = np.zeros(n, dtype=bool)
        test_mask[fold] = True
        x_tr, y_tr = x_all[~test_mask], y_all[~test_mask]
        x_te, y_te = x_all[test_mask], y_all[test_mask]
        mu, sd = x_tr.mean(axis=0), x_tr.std(axis=0)
        sd[sd == 0] = 1.0
        design_tr = np.column_stack([np.ones(len(x_tr)), (x_tr - mu) / sd])
        design_te = np.column_stack([np.ones(len(x_te)), (x_te - mu) / sd])
        beta = _ols_fit(design_tr, y_tr)
        pred_te = design_te @ beta
        resid = y_te - pred_te
        tss = np.sum((y_te - y_te.mean()) ** 2)
        r2s.append(1.0 - np.sum(resid**2) / tss if tss > 0 else 1.0)
        rmses.append(np.sqrt(np.mean(resid**2)))
        rss_tr = float(np.sum((y_tr - design_tr @ beta) ** 2))
        bics.append(linear_bic(rss_tr, len(y_tr), design_tr.shape[1]))

    def _ms(vals):
        vals = np.asarray(vals)
        return {"mean": float(vals.mean()), "sd": float(vals.std(ddof=1))}

    return {"r2": _ms(r2s), "rmse": _ms(rmses), "bic": _ms(bics), "k": k}


# ---------------------------------------------------------------------------
# Random-intercept linear mixed model
# ---------------------------------------------------------------------------


@dataclass
class LmmFit:
    beta0: float
    beta1: float
    sigma_u2: float
    sigma_eps2: float
    loglik: float
    loglik_lm: float
    icc: float
    r2m: float
    bic_lmm: float
    bic_lm: float
    delta_bic: float
    n_groups: int
    n_obs: int


def icc(sigma_u2: float, sigma_eps2: float) -> float:
    """Fraction of variance attributable to group membership."""
    if sigma_u2 < 0 or sigma_eps2 < 0:
        raise DomainError("variance components must be >= 0")
    total = sigma_u2 + sigma_eps2
    if total == 0:
        raise DomainError("at least one variance component must be positive")
    return sigma_u2 / total


def _lmm_profile_loglik(lam: float, x: np.ndarray, y: np.ndarray, groups: list[np.ndarray]):
    """Profile log-likelihood of the random-intercept model at variance ratio lam.

    With V_j = sigma_eps^2 (I + lam * 11'), beta and sigma_eps^2 have closed
    forms given lam (Woodbury within groups).
    """
    n = len(y)
    xtx = np.zeros((x.shape[1], x.shape[1]))
    xty = np.zeros(x.shape[1])
    logdet = 0.0
    for idx in groups:
        nj = len(idx)
        xj, yj = x[idx], y[idx]
        w = lam / (1.0 + lam * nj)
        xs, ys = xj.sum(axis=0), yj.sum()
        xtx += xj.T @ xj - w * np.outer(xs, xs)
        xty += xj.T @ yj - w * xs * ys
        logdet += np.log1p(lam * nj)
    beta = np.linalg.solve(xtx, xty)
    rss = 0.0
    for idx in groups:
        nj = len(idx)
        rj = y[idx] - x[idx] @ beta
        w = lam / (1.0 + lam * nj)
        rss += rj @ rj - w * rj.sum() ** 2
    sigma_eps2 = rss / n
    loglik = -0.5 * (n * np.log(2 * np.pi * sigma_eps2) + logdet + n)
    return loglik, beta, sigma_eps2


def fit_lmm(table: pd.DataFrame, response: str, predictor: str, group_col: str = "scanner_id") -> LmmFit:
    """Maximum-likelihood random-intercept fit of response ~ predictor + (1 | group).

    ML (not REML) so the BIC comparison against the plain linear model uses the
    same likelihood.  BIC counts variance components as parameters: 4 for the
    mixed model, 3 for the linear model; delta_bic = bic_lm - bic_lmm.
    """
    _check_used_columns(table, [response, predictor, group_col])
    y = table[response].to_numpy(dtype=np.float64)
    x = np.column_stack([np.ones(len(y)), table[predictor].to_numpy(dtype=np.float64)])
    codes, _ = pd.factorize(table[group_col])
    groups = [np.flatnonzero(codes == g) for g in range(codes.max() + 1)]
    if len(groups) < 2 or any(len(g) < 2 for g in groups):
        raise ConfigError("need >= 2 groups with >= 2 observations each")
    n = len(y)

    def neg_profile(log_lam):
        return -_lmm_profile_loglik(np.exp(log_lam), x, y, groups)[0]

    trace = []
    result = optimize.minimize_scalar(neg_profile, bounds=(-16.0, 16.0), method="bounded",
                                      options={"xatol": 1e-10})
    trace.append((float(result.x), float(result.fun)))
    if not result.success or not np.isfinite(result.fun):
        raise ConvergenceError("random-intercept fit did not converge", trace=trace)

    # The boundary lam -> 0 (no group effect) nests the plain linear model.
    ll_lm, beta_lm, sig_lm = _lmm_profile_loglik(0.0, x, y, groups)
    ll_opt, beta, sigma_eps2 = _lmm_profile_loglik(float(np.exp(result.x)), x, y, groups)
    if ll_lm >= ll_opt:
        lam_hat, loglik, beta, sigma_eps2 = 0.0, ll_lm, beta_lm, sig_lm
    else:
        lam_hat, loglik = float(np.exp(result.x)), ll_opt
    sigma_u2 = lam_hat * sigma_eps2

    fixed_pred = x @ beta
    sigma_beta2 = float(np.var(fixed_pred))
    bic_lmm = -2.0 * loglik + 4.0 * np.log(n)
    bic_lm = -2.0 * ll_lm + 3.0 * np.log(n)
    return LmmFit(
        beta0=float(beta[0]),
        beta1=float(beta[1]),
        sigma_u2=float(sigma_u2),
        sigma_eps2=float(sigma_eps2),
        loglik=float(loglik),
        loglik_lm=float(ll_lm),
        icc=icc(sigma_u2, sigma_eps2),
        r2m=sigma_beta2 / (sigma_beta2 + sigma_eps2 + sigma_u2),
        bic_lmm=float(bic_lmm),
        bic_lm=float(bic_lm),
        delta_bic=float(bic_lm - bic_lmm),
        n_groups=len(groups),
        n_obs=n,
    )


# ---------------------------------------------------------------------------
# PCA and logistic regression AUC
# ---------------------------------------------------------------------------


def pca_reduce(features: np.ndarray, var_target: float = 0.70) -> tuple[np.ndarray, np.ndarray]:
    """Smallest set of principal components explaining >= var_target of variance.

    Returns (components, projected data); components are orthonormal rows in
    descending eigenvalue order, ties broken by index.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise DomainError("need a 2D matrix with at least 2 rows")
    centered = x - x.mean(axis=0)
    _, svals, vt = np.linalg.svd(centered, full_matrices=False)
    total = float((svals**2).sum())
    if total <= 0:
        raise DomainError("input has zero variance")
    explained = np.cumsum(svals**2) / total
    m = int(np.searchsorted(explained, var_target - 1e-12) + 1)
    components = vt[:m]
    return components, centered @ components.T


def fit_logistic_auc(x: np.ndarray, y: np.ndarray, l2: float = 1e-6, max_iter: int = 100) -> float:
    """Logistic regression by IRLS (small L2 for separable data); AUC by rank statistic."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    y = np.asarray(y, dtype=np.float64).ravel()
    classes = np.unique(y)
    if classes.size != 2:
        raise DomainError("need exactly two classes")
    y01 = (y == classes[1]).astype(np.float64)
    design = np.column_stack([np.ones(len(y01)), x])
    beta = np.zeros(design.shape[1])
    for _ in range(max_iter):
        eta = design @ beta
        p = 1.0 / (1.0 + np.exp(-eta))
        wdiag = np.clip(p * (1.0 - p), 1e-10, None)
        grad = design.T @ (y01 - p) - l2 * beta
        hess = (design * wdiag[:, None]).T @ design + l2 * np.eye(design.shape[1])
        step = np.linalg.solve(hess, grad)
        beta = beta + step
        if np.max(np.abs(step)) < 1e-10:
            break
    return auc_from_scores(design @ beta, y01)


def auc_from_scores(scores: np.ndarray, labels: np.ndarray) -> float:
    """Mann-Whitney AUC with midrank tie handling."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DomainError("both classes must be present")
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(labels.size, dtype=np.float64)
    sorted_scores = scores[order]
    i = 0
    while i < labels.size:
        j = i
        while j + 1 < labels.size and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    rank_sum = ranks[labels].sum()
    return float((rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


# ---------------------------------------------------------------------------
# Toy 3D CNN classifier harness
# ---------------------------------------------------------------------------


class TinyCNN3D(nn.Module):
    """Three conv stages, global pooling, linear head; fixed across conditions."""

    def __init__(self, n_classes: int = 2, width: int = 8):
        super().__init__()
        self.conv1 = nn.Conv3d(1, width, 3, stride=2, padding=1)
        self.conv2 = nn.Conv3d(width, 2 * width, 3, stride=2, padding=1)
        self.conv3 = nn.Conv3d(2 * width, 4 * width, 3, stride=2, padding=1)
        self.head = nn.Linear(4 * width, n_classes)

    def forward(self, x):
        h = F.relu(self.conv1(x))
        h = F.relu(self.conv2(h))
        h = F.relu(self.conv3(h))
        return self.head(F.adaptive_avg_pool3d(h, 1).flatten(1))


def confusion_metrics(tp: int, fp: int, fn: int, tn: int) -> dict:
    total = tp + fp + fn + tn
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return {
        "accuracy": (tp + tn) / total,
        "precision": precision,
        "recall": recall,
        "f1": f1,
    }


def _stratified_split(labels: np.ndarray, train_per_class: int, rng: np.random.Generator):
    train_idx, test_idx = [], []
    for cls in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == cls))
        train_idx.extend(idx[:train_per_class])
        test_idx.extend(idx[train_per_class:])
    return np.array(train_idx), np.array(test_idx)


def train_toy_classifier(
    volumes,
    labels,
    n_splits: int = 10,
    train_fraction: float = 0.65,
    epochs: int = 25,
    batch_size: int = 8,
    lr: float = 1e-3,
    seed: int = 0,
) -> dict:
    """Train the fixed vanilla 3D CNN over random stratified splits.

    Splits keep an equal per-class count in training; reports the mean and sd
    of accuracy, precision, recall, and F1 over the splits.
    """
    labels = np.asarray(labels)
    classes = np.unique(labels)
    if classes.size != 2:
        raise ConfigError("the toy classifier is a binary harness")
    counts = {int(c): int((labels == c).sum()) for c in classes}
    if min(counts.values()) < 2 * n_splits:
        raise ConfigError(f"each class needs at least {2 * n_splits} examples, have {counts}")
    y = (labels == classes[1]).astype(np.int64)
    data = torch.stack(
        [torch.as_tensor(np.asarray(v.data if isinstance(v, Volume) else v), dtype=torch.float32).unsqueeze(0)
         for v in volumes]
    )
    train_per_class = max(int(round(train_fraction * min(counts.values()))), 1)

    per_split = {m: [] for m in ("accuracy", "precision", "recall", "f1")}
    for split in range(n_splits):
        rng = np.random.default_rng(seed + split)
        torch.manual_seed(seed + split)
        tr, te = _stratified_split(y, train_per_class, rng)
        model = TinyCNN3D()
        opt = torch.optim.Adam(model.parameters(), lr=lr)
        targets = torch.as_tensor(y)
        for _ in range(epochs):
            perm = rng.permutation(len(tr))
            for start in range(0, len(tr), batch_size):
                batch = tr[perm[start : start + batch_size]]
                opt.zero_grad()
                loss = F.cross_entropy(model(data[batch]), targets[batch])
                loss.backward()
                opt.step()
        with torch.no_grad():
            pred = model(data[te]).argmax(dim=1).numpy()
        truth = y[te]
        tp = int(((pred == 1) & (truth == 1)).sum())
        fp = int(((pred == 1) & (truth == 0)).sum())
        fn = int(((pred == 0) & (truth == 1)).sum())
        tn = int(((pred == 0) & (truth == 0)).sum())
        for name, val in confusion_metrics(tp, fp, fn, tn).items():
            per_split[name].append(val)

    return {
        name: {"mean": float(np.mean(vals)), "sd": float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0}
        for name, vals in per_split.items()
    }
