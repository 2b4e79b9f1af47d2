"""Linear classifiers and the evaluation protocols built on them.

Two trainers share one full-batch gradient-descent loop: multinomial
logistic regression and a one-vs-rest linear SVM.  Around them sit the
dataset protocols: fixed per-class train/test splits, cross-validated
regularizer selection inside the training set, source/target domain
composition, and learning curves over nested training sizes.  Everything
is seeded and deterministic; scores are mean per-class accuracy.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DimensionMismatch,
    Divergence,
    EmptyClass,
    EmptyGrid,
    InsufficientClassSize,
    LabelDictMismatch,
    ShapeMismatch,
    SingleClass,
)

#: regularizer grid used when the caller does not supply one
DEFAULT_GRID = (1e-4, 1e-3, 1e-2, 1e-1, 1.0)


@dataclass
class LinearModel:
    weights: np.ndarray  # (k, d)
    bias: np.ndarray  # (k,)
    classes: np.ndarray  # (k,) label values in score-column order
    kind: str = "logreg"
    reg: float = 0.0
    seed: int = 0


def _encode_labels(y):
    y = np.asarray(y)
    classes = np.unique(y)
    if classes.shape[0] < 2:
        raise SingleClass(
            f"training needs at least two classes, got {classes.shape[0]}"
        )
    index = {c: i for i, c in enumerate(classes)}
    return classes, np.array([index[v] for v in y], dtype=np.intp)


def _check_xy(X, y):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ShapeMismatch(f"feature matrix must be 2-d, got {X.shape}")
    if X.shape[0] != len(y):
        raise ShapeMismatch(f"{X.shape[0]} rows but {len(y)} labels")
    return X


def _softmax_rows(s):
    z = s - s.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _descend(X, k, grad_fn, epochs, lr, momentum, dropout, seed):
    """Deterministic full-batch GD; lr halves at each quarter of the run.

    With dropout on, a fresh Bernoulli(0.5) feature mask is drawn for each
    presentation (epoch) of the data.
    """
    n, d = X.shape
    W = np.zeros((k, d))
    b = np.zeros(k)
    vW = np.zeros_like(W)
    vb = np.zeros_like(b)
    rng = np.random.default_rng(seed) if dropout else None
    quarter = max(1, epochs // 4)
    for t in range(epochs):
        step = lr * 0.5 ** (t // quarter)
        Xt = X * (rng.random(X.shape) >= 0.5) if dropout else X
        gW, gb = grad_fn(W, b, Xt)
        vW = momentum * vW - step * gW
        vb = momentum * vb - step * gb
        W += vW
        b += vb
        if not (np.all(np.isfinite(W)) and np.all(np.isfinite(b))):
            raise Divergence("classifier parameters are not finite", epoch=t)
    if dropout:
        # training saw masked features; evaluation uses 0.5-scaled features,
        # which folds into the weights
        W *= 0.5
    return W, b


def train_logreg(X, y, reg=1e-3, epochs=200, lr=0.5, momentum=0.9,
                 dropout=False, seed=0) -> LinearModel:
    """Multinomial logistic regression, cross-entropy plus (reg/2)*||W||^2.

    The bias is left unregularized.  Deterministic: zero init, full-batch
    updates, fixed epoch count.  ``dropout`` applies a fresh feature mask
    per epoch and folds the test-time 0.5 scaling into the weights.
    """
    X = _check_xy(X, y)
    classes, yi = _encode_labels(y)
    k, n = classes.shape[0], X.shape[0]
    onehot = np.zeros((n, k))
    onehot[np.arange(n), yi] = 1.0

    def grad(W, b, Xt):
        P = _softmax_rows(Xt @ W.T + b)
        G = (P - onehot) / n
        return G.T @ Xt + reg * W, G.sum(axis=0)

    W, b = _descend(X, k, grad, epochs, lr, momentum, dropout, seed)
    return LinearModel(weights=W, bias=b, classes=classes,
                       kind="logreg", reg=reg, seed=seed)


def train_svm(X, y, reg=1e-3, epochs=200, lr=0.5, momentum=0.9,
              dropout=False, seed=0) -> LinearModel:
    """One-vs-rest linear SVM trained on the hinge subgradient.

    Each class gets a binary +-1 problem against the rest; the shared loop
    runs all of them at once on the (n, k) margin matrix.
    """
    X = _check_xy(X, y)
    classes, yi = _encode_labels(y)
    k, n = classes.shape[0], X.shape[0]
    T = -np.ones((n, k))
    T[np.arange(n), yi] = 1.0

    def grad(W, b, Xt):
        S = Xt @ W.T + b
        active = (T * S < 1.0).astype(np.float64)
        AT = active * T
        return -(AT.T @ Xt) / n + reg * W, -AT.mean(axis=0)

    W, b = _descend(X, k, grad, epochs, lr, momentum, dropout, seed)
    return LinearModel(weights=W, bias=b, classes=classes, kind="svm",
                       reg=reg, seed=seed)


def decision_scores(model: LinearModel, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != model.weights.shape[1]:
        raise DimensionMismatch(
            f"model expects (n, {model.weights.shape[1]}) features, "
            f"got {X.shape}"
        )
    return X @ model.weights.T + model.bias


def predict(model: LinearModel, X):
    """Returns (labels, scores); argmax with lowest-index tie-break."""
    scores = decision_scores(model, X)
    return model.classes[np.argmax(scores, axis=1)], scores


def make_trainer(kind, **kw):
    """Bind a trainer name to keyword arguments; returns fn(X, y, reg)."""
    fn = {"logreg": train_logreg, "svm": train_svm}[kind]
    return lambda X, y, reg: fn(X, y, reg=reg, **kw)


# ---------------------------------------------------------------------------
# scoring


def confusion_matrix(pred, truth, classes) -> np.ndarray:
    """Counts with rows indexed by true class, columns by predicted."""
    classes = np.asarray(classes)
    index = {c: i for i, c in enumerate(classes)}
    mat = np.zeros((len(classes), len(classes)), dtype=np.int64)
    for p, t in zip(pred, truth):
        mat[index[t], index[p]] += 1
    return mat


def mean_per_class_accuracy(pred, truth, classes=None) -> float:
    """Accuracy averaged over classes, so rare classes weigh as much as
    common ones.  Raises if a listed class has no true samples."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ShapeMismatch(
            f"{pred.shape[0]} predictions vs {truth.shape[0]} true labels"
        )
    if classes is None:
        classes = np.unique(truth)
    accs = []
    for c in classes:
        mask = truth == c
        if not mask.any():
            raise EmptyClass(f"class {c!r} has no test samples")
        accs.append(float(np.mean(pred[mask] == c)))
    return float(np.mean(accs))


# ---------------------------------------------------------------------------
# split protocols


@dataclass
class SplitSet:
    splits: list  # of (train_idx, test_idx)
    per_class_train: int
    per_class_test: int | None
    seed: int

    def __iter__(self):
        return iter(self.splits)

    def __len__(self):
        return len(self.splits)

    def __getitem__(self, i):
        return self.splits[i]


def make_splits(labels, per_class_train, n_splits, seed,
                per_class_test=None) -> SplitSet:
    """Seeded per-class train/test splits.

    Each split draws ``per_class_train`` samples per class for training;
    the test side is the class remainder, or exactly ``per_class_test``
    drawn from it when given.  Index arrays come out sorted.
    """
    labels = np.asarray(labels)
    classes = np.unique(labels)
    need = per_class_train + (per_class_test if per_class_test else 1)
    groups = {}
    for c in classes:
        idx = np.flatnonzero(labels == c)
        if idx.shape[0] < need:
            raise InsufficientClassSize(
                f"class {c!r} has {idx.shape[0]} samples, protocol needs {need}"
            )
        groups[c] = idx
    splits = []
    for child in np.random.SeedSequence(seed).spawn(n_splits):
        rng = np.random.default_rng(child)
        train = []
        test = []
        for c in classes:
            perm = rng.permutation(groups[c])
            train.append(perm[:per_class_train])
            if per_class_test:
                test.append(perm[per_class_train : per_class_train + per_class_test])
            else:
                test.append(perm[per_class_train:])
        splits.append((np.sort(np.concatenate(train)),
                       np.sort(np.concatenate(test))))
    return SplitSet(splits=splits, per_class_train=per_class_train,
                    per_class_test=per_class_test, seed=seed)


def crossval_select(X, y, grid, subsplit, trainer, n_rounds=5, seed=0):
    """Pick a regularizer by cross-validation inside the training set.

    ``X`` and ``y`` are the training rows only; the outer test set never
    reaches this function.  ``subsplit`` is (per-class subtrain count,
    per-class held-out count).  Each round re-splits, every grid value is
    trained on the subtrain rows and scored on the held-out rows, and
    scores are averaged over rounds.  Ties go to the strongest
    regularizer.  Returns (best, {reg: mean score}).
    """
    grid = sorted(grid)
    if not grid:
        raise EmptyGrid("regularizer grid is empty")
    sub_train, sub_val = subsplit
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    rounds = make_splits(y, sub_train, n_rounds, seed,
                         per_class_test=sub_val)
    totals = {reg: 0.0 for reg in grid}
    for tr, va in rounds:
        for reg in grid:
            model = trainer(X[tr], y[tr], reg)
            pred, _ = predict(model, X[va])
            totals[reg] += mean_per_class_accuracy(pred, y[va])
    table = {reg: totals[reg] / n_rounds for reg in grid}
    best = grid[0]
    for reg in grid[1:]:
        if table[reg] >= table[best]:
            best = reg
    return best, table


# ---------------------------------------------------------------------------
# domain transfer


def domain_compose(source, target, mode):
    """Compose a training FeatureMatrix from source and target domains.

    Mode "S" returns the source rows, "T" the target rows, "ST" their
    concatenation with source rows first.  Non-empty domains must agree on
    feature dimension and label dictionary.
    """
    from .features import FeatureMatrix

    if mode not in ("S", "T", "ST"):
        raise ValueError(f"mode must be S, T or ST, got {mode!r}")
    if source.dim != target.dim:
        raise DimensionMismatch(
            f"domains disagree on feature dim: {source.dim} vs {target.dim}"
        )
    n_s = source.features.shape[0]
    n_t = target.features.shape[0]
    if n_s and n_t:
        ls = set(l for l in source.labels)
        lt = set(l for l in target.labels)
        if ls != lt:
            raise LabelDictMismatch(
                f"domains disagree on classes: {sorted(ls ^ lt)!r}"
            )
    if mode == "S":
        picked = [source]
    elif mode == "T":
        picked = [target]
    else:
        picked = [source, target]
    return FeatureMatrix(
        features=np.concatenate([p.features for p in picked]),
        ids=[i for p in picked for i in p.ids],
        labels=[l for p in picked for l in p.labels],
        layer=source.layer or target.layer,
        source_hash=source.source_hash or target.source_hash,
    )


@dataclass
class DomainSplit:
    source_train: np.ndarray  # indices into the source domain
    target_train: np.ndarray  # indices into the target domain
    target_test: np.ndarray


def domain_sample(source_labels, target_labels, per_class_source,
                  per_class_target, seed) -> DomainSplit:
    """Draw the per-class training pools for a transfer experiment.

    Both pools are drawn regardless of which will be used, so the held-out
    target test set is identical whichever composition mode trains on it.
    """
    source_labels = np.asarray(source_labels)
    target_labels = np.asarray(target_labels)
    src_classes = set(np.unique(source_labels).tolist())
    tgt_classes = set(np.unique(target_labels).tolist())
    if src_classes != tgt_classes:
        raise LabelDictMismatch(
            f"domains disagree on classes: {sorted(src_classes ^ tgt_classes)!r}"
        )
    ss_src, ss_tgt = np.random.SeedSequence(seed).spawn(2)
    rng_src = np.random.default_rng(ss_src)
    rng_tgt = np.random.default_rng(ss_tgt)
    src_train = []
    tgt_train = []
    tgt_test = []
    for c in sorted(src_classes):
        s_idx = np.flatnonzero(source_labels == c)
        if s_idx.shape[0] < per_class_source:
            raise InsufficientClassSize(
                f"source class {c!r} has {s_idx.shape[0]} samples, "
                f"needs {per_class_source}"
            )
        t_idx = np.flatnonzero(target_labels == c)
        if t_idx.shape[0] < per_class_target + 1:
            raise InsufficientClassSize(
                f"target class {c!r} has {t_idx.shape[0]} samples, "
                f"needs {per_class_target + 1}"
            )
        src_train.append(rng_src.permutation(s_idx)[:per_class_source])
        perm = rng_tgt.permutation(t_idx)
        tgt_train.append(perm[:per_class_target])
        tgt_test.append(perm[per_class_target:])
    return DomainSplit(
        source_train=np.sort(np.concatenate(src_train)),
        target_train=np.sort(np.concatenate(tgt_train)),
        target_test=np.sort(np.concatenate(tgt_test)),
    )


# ---------------------------------------------------------------------------
# reports


@dataclass
class EvalReport:
    protocol: str
    layer: str
    classifier: str
    grid: list
    chosen_reg: float | None
    split_scores: list
    classes: list
    confusions: list = field(default_factory=list)  # one matrix per split
    extra: dict = field(default_factory=dict)

    @property
    def mean(self):
        return float(np.mean(self.split_scores))

    @property
    def std(self):
        return float(np.std(self.split_scores))


def learning_curve(X, y, sizes, n_splits, seed, trainer,
                   per_class_test=None):
    """Mean per-class accuracy versus training-set size.

    For one split, every size shares the same seeded per-class ordering,
    so smaller training sets nest inside larger ones and the test set is
    fixed across sizes (paired comparison).  ``trainer`` is fn(X, y) ->
    model.  Returns one EvalReport per size, in ascending size order.
    """
    sizes = sorted(int(s) for s in sizes)
    if not sizes or sizes[0] < 1:
        raise ValueError("sizes must be positive integers")
    labels = np.asarray(y)
    classes = np.unique(labels)
    biggest = sizes[-1]
    need = biggest + (per_class_test if per_class_test else 1)
    groups = {}
    for c in classes:
        idx = np.flatnonzero(labels == c)
        if idx.shape[0] < need:
            raise InsufficientClassSize(
                f"class {c!r} has {idx.shape[0]} samples, curve needs {need}"
            )
        groups[c] = idx
    X = np.asarray(X, dtype=np.float64)
    scores = np.zeros((len(sizes), n_splits))
    confusions = [[None] * n_splits for _ in sizes]
    for j, child in enumerate(np.random.SeedSequence(seed).spawn(n_splits)):
        rng = np.random.default_rng(child)
        perms = {c: rng.permutation(groups[c]) for c in classes}
        if per_class_test:
            test = np.sort(np.concatenate(
                [perms[c][biggest : biggest + per_class_test] for c in classes]))
        else:
            test = np.sort(np.concatenate([perms[c][biggest:] for c in classes]))
        for i, m in enumerate(sizes):
            train = np.sort(np.concatenate([perms[c][:m] for c in classes]))
            model = trainer(X[train], labels[train])
            pred, _ = predict(model, X[test])
            scores[i, j] = mean_per_class_accuracy(pred, labels[test])
            confusions[i][j] = confusion_matrix(pred, labels[test], classes)
    reports = []
    for i, m in enumerate(sizes):
        reports.append(EvalReport(
            protocol=f"curve[{m}/class]", layer="", classifier="",
            grid=[], chosen_reg=None,
            split_scores=[float(s) for s in scores[i]],
            classes=classes.tolist(), confusions=confusions[i],
            extra={"per_class_train": m},
        ))
    return reports


def report_json(report: EvalReport) -> str:
    """Serialize a report with a fixed key order (confusions go to CSV)."""
    doc = {
        "protocol": report.protocol,
        "layer": report.layer,
        "classifier": report.classifier,
        "grid": list(report.grid),
        "chosen_reg": report.chosen_reg,
        "splits": len(report.split_scores),
        "split_scores": [float(s) for s in report.split_scores],
        "mean": report.mean,
        "std": report.std,
        "classes": [str(c) for c in report.classes],
        "extra": report.extra,
    }
    return json.dumps(doc, indent=2) + "\n"


def save_report(report: EvalReport, path):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(report_json(report))


def confusion_csv(report: EvalReport, path):
    """Per-split confusion counts as CSV blocks sharing one header."""
    if not report.confusions:
        raise ValueError("report has no confusion matrices")
    names = [str(c) for c in report.classes]
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("split,true\\pred," + ",".join(names) + "\n")
        for s, mat in enumerate(report.confusions):
            for name, row in zip(names, mat):
                f.write(f"{s},{name}," +
                        ",".join(str(int(v)) for v in row) + "\n")
