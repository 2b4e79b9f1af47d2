"""Exact t-SNE embedding of feature matrices into two dimensions.

The affinity side calibrates one Gaussian bandwidth per point by bisection
until the conditional distribution's perplexity matches the requested
value; the low-dimensional side uses the Student-t kernel and plain
momentum gradient descent with early exaggeration.  Everything runs on
dense n-by-n matrices, so this is meant for hundreds to a few thousand
points, not millions.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateInput, ParseError, PerplexityInfeasible

log = logging.getLogger("convkit")

P_FLOOR = 1e-12


@dataclass
class Embedding:
    coords: np.ndarray  # (n, 2)
    kl_trace: np.ndarray  # objective value per iteration
    perplexity: float
    seed: int


def pairwise_sq_dists(X):
    sq = np.sum(X * X, axis=1)
    d = sq[:, None] + sq[None, :] - 2.0 * (X @ X.T)
    np.fill_diagonal(d, 0.0)
    return np.maximum(d, 0.0)


def _calibrate_row(d, target, tol=1e-4, max_iter=50):
    """Bisect the precision beta until the row entropy hits ``target``.

    ``d`` holds squared distances to the other points.  Returns the
    normalized conditional probabilities and the final beta.
    """
    shift = d.min()
    ds = d - shift
    beta = 1.0
    lo, hi = 0.0, np.inf
    p = np.full_like(ds, 1.0 / ds.shape[0])
    for _ in range(max_iter):
        w = np.exp(-ds * beta)
        s = w.sum()
        if s > 0:
            p = w / s
            entropy = np.log(s) + beta * float((ds * w).sum()) / s
        else:
            entropy = 0.0
        diff = entropy - target
        if abs(diff) < tol:
            break
        if diff > 0:
            lo = beta
            beta = beta * 2.0 if hi == np.inf else 0.5 * (beta + hi)
        else:
            hi = beta
            beta = 0.5 * (lo + beta)
    return p, beta


def conditional_probs(X, perplexity, tol=1e-4):
    """Per-point calibrated conditional affinities; returns (P_cond, betas)."""
    n = X.shape[0]
    d = pairwise_sq_dists(X)
    target = np.log(perplexity)
    P = np.zeros((n, n))
    betas = np.zeros(n)
    others = np.arange(n)
    for i in range(n):
        mask = others != i
        p, beta = _calibrate_row(d[i][mask], target, tol=tol)
        P[i][mask] = p
        betas[i] = beta
    return P, betas


def joint_probs(X, perplexity, tol=1e-4):
    P, betas = conditional_probs(X, perplexity, tol=tol)
    n = X.shape[0]
    P = (P + P.T) / (2.0 * n)
    return np.maximum(P, P_FLOOR), betas


def _dedupe(X, rng):
    """Jitter repeated rows so the affinity calibration stays solvable."""
    _, first = np.unique(X, axis=0, return_index=True)
    dupes = np.setdiff1d(np.arange(X.shape[0]), first)
    if dupes.size:
        log.warning("jittering %d duplicate feature rows before embedding",
                    dupes.size)
        X = X.copy()
        X[dupes] += rng.normal(0.0, 1e-8, size=(dupes.size, X.shape[1]))
    return X


def tsne(X, perplexity=30.0, n_iter=1000, lr=100.0, seed=0,
         early_exaggeration=4.0, exaggeration_iters=100,
         momentum_start=0.5, momentum_final=0.8, momentum_switch=250,
         tol=1e-4) -> Embedding:
    """Embed rows of X into 2-D; deterministic for a fixed seed."""
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    if n < 2 or X.ndim != 2 or X.shape[1] < 1:
        raise DegenerateInput(f"cannot embed input of shape {X.shape}")
    if perplexity <= 0:
        raise DegenerateInput(f"perplexity must be positive, got {perplexity}")
    if n < 3 * perplexity + 1:
        raise PerplexityInfeasible(
            f"{n} points cannot support perplexity {perplexity}; "
            f"need at least {int(np.ceil(3 * perplexity + 1))}"
        )
    if np.unique(X, axis=0).shape[0] == 1:
        raise DegenerateInput("all feature rows are identical")
    ss = np.random.SeedSequence(seed)
    jitter_rng, init_rng = (np.random.default_rng(c) for c in ss.spawn(2))
    X = _dedupe(X, jitter_rng)
    P, _ = joint_probs(X, perplexity, tol=tol)

    Y = init_rng.normal(0.0, 1e-4, size=(n, 2))
    vel = np.zeros_like(Y)
    kl_trace = np.zeros(n_iter)
    for it in range(n_iter):
        d = pairwise_sq_dists(Y)
        num = 1.0 / (1.0 + d)
        np.fill_diagonal(num, 0.0)
        Q = np.maximum(num / num.sum(), P_FLOOR)
        Pe = P * early_exaggeration if it < exaggeration_iters else P
        PQ = (Pe - Q) * num
        grad = 4.0 * (PQ.sum(axis=1)[:, None] * Y - PQ @ Y)
        mom = momentum_start if it < momentum_switch else momentum_final
        vel = mom * vel - lr * grad
        Y = Y + vel
        Y = Y - Y.mean(axis=0)
        kl_trace[it] = float(np.sum(P * np.log(P / Q)))
    return Embedding(coords=Y, kl_trace=kl_trace, perplexity=float(perplexity),
                     seed=seed)


# ---------------------------------------------------------------------------
# presentation


def load_group_map(path):
    """Read a label -> group TSV used to color points by coarser categories."""
    groups = {}
    with open(path, "r", encoding="utf-8") as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.rstrip("\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            label, sep, group = line.partition("\t")
            if not sep or not group.strip():
                raise ParseError("expected label<TAB>group", line=lineno)
            label = label.strip()
            group = group.strip()
            if label in groups and groups[label] != group:
                raise ParseError(
                    f"label {label!r} mapped to both {groups[label]!r} "
                    f"and {group!r}", line=lineno)
            groups[label] = group
    return groups


def export_coords(embedding: Embedding, ids, labels, path):
    """Write id,label,x,y rows for the embedded points."""
    coords = embedding.coords
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("id,label,x,y\n")
        for i in range(coords.shape[0]):
            label = "" if labels[i] is None else str(labels[i])
            f.write(f"{ids[i]},{label},"
                    f"{float(coords[i, 0])!r},{float(coords[i, 1])!r}\n")


def render_scatter(embedding: Embedding, labels, path, group_map=None,
                   title=None):
    """Scatter the 2-D coordinates, one color per label group, to a file."""
    from .plotting import group_colors, new_figure, save_figure

    labels = ["" if l is None else str(l) for l in labels]
    if group_map:
        groups = [group_map.get(l, l) for l in labels]
    else:
        groups = labels
    order = sorted(set(groups))
    colors = group_colors(len(order))
    fig, ax = new_figure()
    for name, color in zip(order, colors):
        mask = np.asarray([g == name for g in groups])
        ax.scatter(embedding.coords[mask, 0], embedding.coords[mask, 1],
                   s=14, color=color, label=name, linewidths=0)
    ax.set_xlabel("dim 1")
    ax.set_ylabel("dim 2")
    if title:
        ax.set_title(title)
    if any(order):
        ax.legend(loc="best", fontsize="small", framealpha=0.8)
    save_figure(fig, path)
