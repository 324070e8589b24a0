"""AUROC, rank statistics, Spearman correlation, linear probes and report files."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit
from scipy.stats import chi2, rankdata

from .core import ContractError

# Nemenyi two-tailed critical values q_0.05 (studentized range / sqrt 2), k = 2..20
NEMENYI_Q05 = {
    2: 1.960, 3: 2.343, 4: 2.569, 5: 2.728, 6: 2.850, 7: 2.949, 8: 3.031, 9: 3.102, 10: 3.164,
    11: 3.219, 12: 3.268, 13: 3.313, 14: 3.354, 15: 3.391, 16: 3.426, 17: 3.458, 18: 3.489,
    19: 3.517, 20: 3.544,
}  # fmt: skip

PROBE_L2 = 1e-3
PROBE_EPOCHS = 5000
PROBE_GRAD_TOL = 1e-6


def auroc(scores, labels) -> float:
    """Mann-Whitney AUROC in [0, 100]; ties count one half."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise ContractError(f"{s.size} scores but {y.size} labels")
    pos = y == 1
    n1, n0 = int(pos.sum()), int((y == 0).sum())
    if n1 == 0 or n0 == 0 or n1 + n0 != y.size:
        raise ContractError("AUROC needs 0/1 labels with both classes present")
    r = rankdata(s)  # midranks
    u = r[pos].sum() - n1 * (n1 + 1) / 2.0
    pairs = n1 * n0
    # round the larger tail only; 100 - v is then exact (Sterbenz), so flipping
    # the scores maps v to 100 - v bit for bit
    big = float(100.0 * max(u, pairs - u) / pairs)
    return big if 2.0 * u >= pairs else 100.0 - big


def spearman_corr(a, b) -> float:
    """Pearson correlation of midranks; NaN when either input is constant."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.size != b.size or a.size < 3:
        raise ContractError("spearman_corr needs two vectors of equal length >= 3")
    ra, rb = rankdata(a) - (a.size + 1) / 2.0, rankdata(b) - (b.size + 1) / 2.0
    den = math.sqrt(float(ra @ ra) * float(rb @ rb))
    if den == 0.0:
        return float("nan")
    return float(np.clip((ra @ rb) / den, -1.0, 1.0))


def nemenyi_q(k: int, alpha: float = 0.05) -> float:
    if alpha == 0.05 and k in NEMENYI_Q05:
        return NEMENYI_Q05[k]
    from scipy.stats import studentized_range

    return float(studentized_range.ppf(1.0 - alpha, k, np.inf) / math.sqrt(2.0))


@dataclass
class RankResult:
    methods: list[str]
    avg_ranks: np.ndarray
    n_rows: int
    friedman_stat: float
    friedman_p: float
    critical_difference: float
    significant_pairs: list[tuple[str, str]]
    excluded_rows: list[int] = field(default_factory=list)

    def to_json(self) -> str:
        sig = {m: [] for m in self.methods}
        for a, b in self.significant_pairs:
            sig[a].append(b)
            sig[b].append(a)
        rows = [
            {"method": m, "avg_rank": float(r), "significant_pairs": sorted(sig[m])}
            for m, r in zip(self.methods, self.avg_ranks)
        ]
        return json.dumps(
            {
                "methods": rows,
                "n_rows": self.n_rows,
                "friedman_stat": self.friedman_stat,
                "friedman_p": self.friedman_p,
                "critical_difference": self.critical_difference,
                "excluded_rows": self.excluded_rows,
            },
            indent=2,
        )


def rank_compare(table, methods: list[str] | None = None, alpha: float = 0.05) -> RankResult:
    """Friedman test plus Nemenyi critical difference over a rows x methods AUROC table.

    Rank 1 is the best (highest) AUROC. Rows with any missing (NaN) entry are
    left out and reported in ``excluded_rows``.
    """
    T = np.asarray(table, dtype=np.float64)
    if T.ndim != 2:
        raise ContractError("score table must be 2-D (rows x methods)")
    k = T.shape[1]
    methods = list(methods) if methods is not None else [f"m{i}" for i in range(k)]
    if len(methods) != k:
        raise ContractError("method names do not match table width")
    if k < 3:
        raise ContractError(f"rank comparison needs >= 3 methods, got {k}")
    complete = ~np.isnan(T).any(axis=1)
    excluded = [int(i) for i in np.flatnonzero(~complete)]
    T = T[complete]
    N = T.shape[0]
    if N < 5:
        raise ContractError(f"rank comparison needs >= 5 complete rows, got {N}")
    ranks = np.apply_along_axis(rankdata, 1, -T)
    avg = ranks.mean(axis=0)
    stat = 12.0 * N / (k * (k + 1)) * (float((avg**2).sum()) - k * (k + 1) ** 2 / 4.0)
    p = float(chi2.sf(stat, k - 1))
    cd = nemenyi_q(k, alpha) * math.sqrt(k * (k + 1) / (6.0 * N))
    pairs = [
        (methods[i], methods[j])
        for i in range(k)
        for j in range(i + 1, k)
        if abs(avg[i] - avg[j]) > cd
    ]
    return RankResult(methods, avg, N, float(stat), p, float(cd), pairs, excluded)


def fit_logistic(X, y, l2: float = PROBE_L2, epochs: int = PROBE_EPOCHS, tol: float = PROBE_GRAD_TOL):
    """L2-penalised logistic regression by full-batch gradient descent.

    Step size 1/L from the Lipschitz bound of the mean loss. Returns (w, b).
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n, d = X.shape
    Xb = np.c_[X, np.ones(n)]
    L = 0.25 * np.linalg.norm(Xb, 2) ** 2 / n + l2
    w = np.zeros(d + 1)
    for _ in range(epochs):
        p = expit(Xb @ w)
        g = Xb.T @ (p - y) / n
        g[:d] += l2 * w[:d]
        if np.linalg.norm(g) < tol:
            break
        w -= g / L
    return w[:d], w[d]


def linear_probe(train_X, train_y, test_X, test_y, l2: float = PROBE_L2, epochs: int = PROBE_EPOCHS) -> float:
    """AUROC (0-100) of a logistic-regression probe trained on labelled rows."""
    y = np.asarray(train_y)
    if np.unique(y).size < 2:
        raise ContractError("linear probe needs both classes in the training rows")
    w, b = fit_logistic(train_X, y, l2, epochs)
    return auroc(np.asarray(test_X, dtype=np.float64) @ w + b, test_y)


# reports ---------------------------------------------------------------------


def score_table_csv(rows: list[str], methods: list[str], values) -> str:
    """CSV with one row per (dataset, config) cell; missing entries left blank."""
    V = np.asarray(values, dtype=np.float64)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["cell", *methods])
    for name, r in zip(rows, V):
        w.writerow([name, *("" if np.isnan(v) else repr(float(v)) for v in r)])
    return buf.getvalue()


def read_score_table(text: str) -> tuple[list[str], list[str], np.ndarray]:
    rows = list(csv.reader(io.StringIO(text)))
    methods = rows[0][1:]
    names = [r[0] for r in rows[1:]]
    V = np.array([[float(c) if c else np.nan for c in r[1:]] for r in rows[1:]], dtype=np.float64)
    return names, methods, V.reshape(len(names), len(methods))


def _figure():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "tadlab"
    return plt


def _save_svg(plt, fig, path) -> None:
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def boxplot_svg(path, groups: dict[str, np.ndarray], ylabel: str = "AUROC") -> None:
    plt = _figure()
    fig, ax = plt.subplots(figsize=(max(4, 0.6 * len(groups)), 3.5))
    names = list(groups)
    ax.boxplot([np.asarray(groups[n], dtype=float) for n in names])
    ax.set_xticks(range(1, len(names) + 1), names, rotation=45, ha="right")
    ax.set_ylabel(ylabel)
    _save_svg(plt, fig, path)


def line_svg(path, x, series: dict[str, np.ndarray], xlabel: str, ylabel: str = "AUROC") -> None:
    plt = _figure()
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for name, ys in series.items():
        ax.plot(x, ys, marker="o", label=name)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.legend(fontsize="small")
    _save_svg(plt, fig, path)


def bar_svg(path, values: dict[str, float], ylabel: str = "AUROC") -> None:
    plt = _figure()
    fig, ax = plt.subplots(figsize=(max(4, 0.6 * len(values)), 3.5))
    names = list(values)
    ax.bar(range(len(names)), [values[n] for n in names])
    ax.set_xticks(range(len(names)), names, rotation=45, ha="right")
    ax.set_ylabel(ylabel)
    _save_svg(plt, fig, path)
