"""Logistic propensity model fitted by IRLS, with AUC / pseudo-R2 / overlap checks."""
import re
import warnings
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy import linalg, stats
from scipy.special import expit
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

# mirrors the selected specification: time bands enter as dummies with the
# 19:00-24:00 band as reference
DEFAULT_FORMULA = (
    "past_disruptions",
    "C(time_band, ref=8)",
    "temp_c",
    "wind_kmh",
    "rain",
    "rail_connect",
    "overground",
    "avg_adj_km",
    "station_age",
    "pre_entry",
    "rolling_stock_age",
    "overground:wind_kmh",
)
# forward selection starts from these and tries the rest one by one
SELECTION_BASE = ("past_disruptions", "C(time_band, ref=8)", "pre_entry")
SELECTION_CANDIDATES = (
    "pre_exit", "temp_c", "wind_kmh", "rain", "rail_connect", "overground",
    "terminal", "screen_door", "n_lines", "avg_adj_km", "station_age",
    "rolling_stock_age", "C(zone)", "overground:wind_kmh",
)

SEPARATION_BOUND = 1e3
_CATEGORICAL = re.compile(r"^C\((\w+)(?:\s*,\s*ref\s*=\s*(\w+))?\)$")
_POWER = re.compile(r"^(\w+)\^(\d+)$")


class SingleClassError(ValueError):
    pass


class SeparationError(RuntimeError):
    pass


class RankDeficientError(ValueError):
    pass


class MissingCovariateError(KeyError):
    pass


class DesignMatrix:
    """Turns a list of term strings into a numeric design matrix.

    Term syntax: ``name`` (numeric column), ``C(name)`` / ``C(name, ref=v)``
    (treatment-coded dummies), ``a:b`` (product of numeric columns),
    ``name^k`` (power).  Categorical levels are frozen at :meth:`fit`.
    """

    def __init__(self, terms):
        self.terms = tuple(terms)
        self.levels_ = {}

    def source_columns(self):
        cols = []
        for term in self.terms:
            for factor in term.split(":"):
                m = _CATEGORICAL.match(factor) or _POWER.match(factor)
                name = m.group(1) if m else factor
                if name not in cols:
                    cols.append(name)
        return cols

    def fit(self, df):
        for term in self.terms:
            m = _CATEGORICAL.match(term)
            if m:
                name, ref = m.group(1), m.group(2)
                levels = sorted(pd.unique(df[name]))
                if ref is None:
                    ref = levels[0]
                else:
                    ref = type(levels[0])(ref) if levels else ref
                self.levels_[name] = (ref, [lv for lv in levels if lv != ref])
        return self

    def transform(self, df):
        missing = [c for c in self.source_columns() if c not in df.columns]
        if missing:
            raise MissingCovariateError(f"covariate missing: {', '.join(missing)}")
        names, cols = [], []
        for term in self.terms:
            m = _CATEGORICAL.match(term)
            if m:
                name = m.group(1)
                v = df[name].to_numpy()
                for lv in self.levels_[name][1]:
                    names.append(f"{name}[{lv}]")
                    cols.append((v == lv).astype(float))
                continue
            prod = np.ones(len(df))
            for factor in term.split(":"):
                pm = _POWER.match(factor)
                if pm:
                    prod = prod * df[pm.group(1)].to_numpy(dtype=float) ** int(pm.group(2))
                else:
                    prod = prod * df[factor].to_numpy(dtype=float)
            names.append(term)
            cols.append(prod)
        X = np.column_stack(cols) if cols else np.empty((len(df), 0))
        bad = ~np.isfinite(X)
        if bad.any():
            j = int(np.flatnonzero(bad.any(axis=0))[0])
            raise MissingCovariateError(f"covariate missing (non-finite values): {names[j]}")
        return X, names


def expand_polynomial(terms, degree, continuous):
    """Append ``x^2 .. x^degree`` for every continuous main-effect term."""
    out = list(terms)
    for term in terms:
        if term in continuous:
            out += [f"{term}^{k}" for k in range(2, degree + 1)]
    return tuple(out)


def _deviance(y, eta):
    # -2 * Bernoulli log-likelihood on the logit scale
    return 2.0 * float(np.sum(np.logaddexp(0.0, eta) - y * eta))


class LogisticPropensity(ClassifierMixin, BaseEstimator):
    """Propensity score model ``logit p = a + b.x`` fitted by IRLS.

    Parameters
    ----------
    terms : sequence of str
        Design terms, see :class:`DesignMatrix`.
    max_iter : int
    tol : float
        Convergence threshold on the absolute change in deviance.
    standardize : bool
        Centre and scale non-binary columns during the fit; coefficients are
        always reported on the original scale.

    Attributes
    ----------
    intercept_, coef_, se_ : float, ndarray, ndarray
        Original-scale estimates; ``se_[0]`` belongs to the intercept.
    feature_names_ : list of str
    dropped_columns_ : list of str
        Constant or duplicated columns removed before fitting.
    deviance_history_ : list of float
        Deviance after every accepted iteration (non-increasing).
    """

    def __init__(self, terms=DEFAULT_FORMULA, max_iter=100, tol=1e-8, standardize=True):
        self.terms = terms
        self.max_iter = max_iter
        self.tol = tol
        self.standardize = standardize

    def _design(self, X):
        if isinstance(X, pd.DataFrame):
            return self.design_.transform(X)
        X = np.asarray(X, dtype=float)
        return X, [f"x{j}" for j in range(X.shape[1])]

    def fit(self, X, y):
        y = np.asarray(y, dtype=float)
        if len(np.unique(y)) < 2:
            raise SingleClassError("treatment has a single class; both 0 and 1 are required")
        if isinstance(X, pd.DataFrame):
            self.design_ = DesignMatrix(self.terms).fit(X)
        Xm, names = self._design(X)

        keep, dropped = [], []
        for j in range(Xm.shape[1]):
            col = Xm[:, j]
            if np.ptp(col) == 0 or any(np.array_equal(col, Xm[:, k]) for k in keep):
                dropped.append(names[j])
            else:
                keep.append(j)
        if dropped:
            warnings.warn(f"dropped constant/duplicate columns: {', '.join(dropped)}")
        Xm = Xm[:, keep]
        names = [names[j] for j in keep]

        binary = np.array([np.isin(Xm[:, j], (0.0, 1.0)).all() for j in range(Xm.shape[1])],
                          dtype=bool)
        mean = np.zeros(Xm.shape[1])
        scale = np.ones(Xm.shape[1])
        if self.standardize and Xm.shape[1]:
            cont = ~binary
            mean[cont] = Xm[:, cont].mean(axis=0)
            scale[cont] = Xm[:, cont].std(axis=0)
        Z = np.column_stack([np.ones(len(y)), (Xm - mean) / scale])

        _, R, piv = linalg.qr(Z, mode="economic", pivoting=True)
        diag = np.abs(np.diag(R))
        rank = int((diag > diag[0] * 1e-10).sum())
        if rank < Z.shape[1]:
            bad = sorted(names[j - 1] if j else "Intercept" for j in piv[rank:])
            raise RankDeficientError(f"design matrix is rank deficient; dependent columns: "
                                     f"{', '.join(bad)}")

        b, history, n_iter, converged = self._irls(Z, y)
        eta = Z @ b
        mu = expit(eta)
        w = mu * (1 - mu)
        if np.abs(b).max() > SEPARATION_BOUND or w.min() < 1e-12:
            raise SeparationError("perfect or quasi separation: fitted weights collapse "
                                  "and coefficients diverge")
        cov_std = linalg.inv((Z * w[:, None]).T @ Z)
        T = np.eye(Z.shape[1])
        T[0, 1:] = -mean / scale
        T[np.arange(1, Z.shape[1]), np.arange(1, Z.shape[1])] = 1.0 / scale
        beta = T @ b
        cov = T @ cov_std @ T.T

        self.intercept_ = float(beta[0])
        self.coef_ = beta[1:]
        self.se_ = np.sqrt(np.diag(cov))
        self.coef_std_ = b
        self.feature_names_ = names
        self.dropped_columns_ = dropped
        self.keep_ = keep
        self.mean_ = mean
        self.scale_ = scale
        self.deviance_history_ = history
        self.deviance_ = history[-1]
        self.n_iter_ = n_iter
        self.converged_ = converged
        self.classes_ = np.array([0, 1])
        ybar = y.mean()
        self.null_deviance_ = -2.0 * len(y) * (ybar * np.log(ybar) + (1 - ybar) * np.log(1 - ybar))
        self.n_obs_ = len(y)
        return self

    def _irls(self, Z, y):
        b = np.zeros(Z.shape[1])
        ybar = y.mean()
        b[0] = np.log(ybar / (1 - ybar))
        dev = _deviance(y, Z @ b)
        history = [dev]
        converged = False
        it = 0
        for it in range(1, self.max_iter + 1):
            eta = Z @ b
            mu = expit(eta)
            w = mu * (1 - mu)
            # Newton step == weighted least squares on the working response
            step = linalg.solve((Z * w[:, None]).T @ Z, Z.T @ (y - mu), assume_a="pos")
            t = 1.0
            for _ in range(40):
                b_new = b + t * step
                dev_new = _deviance(y, Z @ b_new)
                if dev_new <= dev:
                    break
                t *= 0.5
            else:
                converged = True
                break
            if np.abs(b_new).max() > SEPARATION_BOUND:
                raise SeparationError("coefficients diverge (perfect separation)")
            assert dev_new <= history[-1]
            b, delta, dev = b_new, dev - dev_new, dev_new
            history.append(dev)
            if delta < self.tol:
                converged = True
                break
        return b, history, it, converged

    def decision_function(self, X):
        check_is_fitted(self, "coef_")
        Xm, _ = self._design(X)
        return self.intercept_ + Xm[:, self.keep_] @ self.coef_

    def predict_proba(self, X):
        p = expit(self.decision_function(X))
        return np.column_stack([1 - p, p])

    def predict(self, X):
        return (self.predict_proba(X)[:, 1] >= 0.5).astype(int)

    def coefficient_table(self):
        return pd.DataFrame({
            "term": ["Intercept"] + list(self.feature_names_),
            "coef": np.r_[self.intercept_, self.coef_],
            "se": self.se_,
        })


@dataclass
class DiagnosticsReport:
    auc: float
    mcfadden_r2: float
    deviance: float
    n_iter: int
    coefficients: pd.DataFrame = field(repr=False)
    dropped_columns: list = field(default_factory=list)


def fit_logistic(panel, formula=DEFAULT_FORMULA, **kwargs):
    """Fit the propensity model on a :class:`~metrovuln.panel.Panel`."""
    units = panel.units if hasattr(panel, "units") else panel
    model = LogisticPropensity(terms=tuple(formula), **kwargs)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        model.fit(units, units["W"].to_numpy())
    scores = model.predict_proba(units)[:, 1]
    auc_value, r2 = diagnostics(scores, units["W"].to_numpy())
    report = DiagnosticsReport(auc_value, r2, model.deviance_, model.n_iter_,
                               model.coefficient_table(), model.dropped_columns_)
    return model, report


def predict_scores(model, panel):
    units = panel.units if hasattr(panel, "units") else panel
    return model.predict_proba(units)[:, 1]


def _check_labels(labels):
    labels = np.asarray(labels).astype(int)
    if labels.min() == labels.max():
        raise SingleClassError("labels have a single class")
    return labels


def auc(scores, labels):
    """AUC from the rank-sum (Mann-Whitney) statistic, ties as 1/2."""
    labels = _check_labels(labels)
    ranks = stats.rankdata(scores)
    pos = labels == 1
    n1, n0 = int(pos.sum()), int((~pos).sum())
    u = ranks[pos].sum() - n1 * (n1 + 1) / 2.0
    return float(u / (n1 * n0))


def auc_pairs(scores, labels, chunk=2048):
    """AUC by explicit counting over all (treated, control) pairs."""
    labels = _check_labels(labels)
    scores = np.asarray(scores, dtype=float)
    s1 = scores[labels == 1]
    s0 = scores[labels == 0]
    twice = 0
    for i in range(0, len(s1), chunk):
        block = s1[i:i + chunk, None]
        twice += 2 * int((block > s0).sum()) + int((block == s0).sum())
    return float(twice / 2.0 / (len(s1) * len(s0)))


def mcfadden_r2(scores, labels):
    labels = _check_labels(labels).astype(float)
    s = np.clip(np.asarray(scores, dtype=float), 1e-300, 1 - 1e-16)
    ll = float(np.sum(labels * np.log(s) + (1 - labels) * np.log1p(-s)))
    ybar = labels.mean()
    ll0 = len(labels) * (ybar * np.log(ybar) + (1 - ybar) * np.log(1 - ybar))
    return 1.0 - ll / ll0


def diagnostics(scores, labels):
    """``(auc, mcfadden_r2)`` of propensity scores against treatment labels."""
    return auc(scores, labels), mcfadden_r2(scores, labels)


@dataclass
class SupportReport:
    histogram: pd.DataFrame
    out_of_support: np.ndarray
    keep: np.ndarray

    @property
    def fraction_out(self):
        n_treated = int(self.histogram["count_treated"].sum())
        return len(self.out_of_support) / n_treated if n_treated else 0.0


def common_support(scores, labels, bins=20, mode="warn"):
    """Score histograms by class and treated units outside the control range.

    ``mode="trim"`` marks out-of-support treated units as dropped in ``keep``;
    ``"warn"`` only warns.
    """
    if mode not in ("warn", "trim"):
        raise ValueError(f"mode must be 'warn' or 'trim', got {mode!r}")
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels).astype(int)
    edges = np.linspace(0.0, 1.0, bins + 1)
    ct, _ = np.histogram(scores[labels == 1], bins=edges)
    cc, _ = np.histogram(scores[labels == 0], bins=edges)
    hist = pd.DataFrame({"bin_lo": edges[:-1], "bin_hi": edges[1:],
                         "count_treated": ct, "count_control": cc})
    ctrl = scores[labels == 0]
    keep = np.ones(len(scores), dtype=bool)
    if len(ctrl):
        outside = (labels == 1) & ((scores > ctrl.max()) | (scores < ctrl.min()))
    else:
        outside = labels == 1
    out_idx = np.flatnonzero(outside)
    if len(out_idx):
        if mode == "trim":
            keep[out_idx] = False
        else:
            warnings.warn(f"{len(out_idx)} treated units lie outside common support")
    return SupportReport(hist, out_idx, keep)


def forward_select(units, base=SELECTION_BASE, candidates=SELECTION_CANDIDATES, alpha=0.05):
    """Likelihood-ratio forward selection.

    Starting from ``base``, each candidate is tried in order and kept when
    the LR test against the current model rejects at level ``alpha``.

    Returns
    -------
    terms : tuple of str
    log : DataFrame
        One row per tested candidate (``term, lr_stat, df, p_value, added``).
    """
    y = units["W"].to_numpy()

    def fit(terms):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            return LogisticPropensity(terms=tuple(terms)).fit(units, y)

    terms = list(base)
    current = fit(terms)
    rows = []
    for cand in candidates:
        try:
            trial = fit(terms + [cand])
        except (RankDeficientError, SeparationError):
            rows.append((cand, np.nan, 0, np.nan, False))
            continue
        df = len(trial.feature_names_) - len(current.feature_names_)
        lr = current.deviance_ - trial.deviance_
        p = float(stats.chi2.sf(lr, df)) if df > 0 else 1.0
        added = df > 0 and p < alpha
        rows.append((cand, lr, df, p, added))
        if added:
            terms.append(cand)
            current = trial
    log = pd.DataFrame(rows, columns=["term", "lr_stat", "df", "p_value", "added"])
    return tuple(terms), log
