"""Feature extraction from tapped layers, plus storage and projection.

Features are rows of flattened activations taken at a named layer.  The
FeatureMatrix carries sample ids and labels alongside the matrix itself,
plus provenance (which layer, which network) so downstream evaluation can
refuse to mix incompatible extractions.  Matrices round-trip through a
small binary format (.fmx) and export to CSV.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatch, FormatError
from .network import Network, NetworkSpec, WeightBundle, preprocess, spec_hash
from .tensor import FLOAT


@dataclass
class FeatureMatrix:
    features: np.ndarray  # (n, d) float32
    ids: list
    labels: list  # str or None per row
    layer: str = ""
    source_hash: str = ""

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=FLOAT)
        if self.features.ndim != 2:
            raise DimensionMismatch(
                f"feature matrix must be 2-d, got {self.features.shape}"
            )
        n = self.features.shape[0]
        if len(self.ids) != n or len(self.labels) != n:
            raise DimensionMismatch(
                f"{n} feature rows but {len(self.ids)} ids / {len(self.labels)} labels"
            )

    @property
    def dim(self):
        return self.features.shape[1]

    def label_array(self):
        """Labels as a numpy object array, for masking and protocol code."""
        return np.asarray(self.labels, dtype=object)


def extract(spec: NetworkSpec, bundle: WeightBundle, images, layer,
            batch=16, mean_override=None) -> FeatureMatrix:
    """Run images through the network and collect the named layer's output.

    ``images`` is a sequence of ImageRecord.  Rows keep input order.  An
    empty sequence yields a (0, d) matrix with d resolved from the spec.
    """
    net = Network(spec, bundle)
    dim = spec.layer_out_dim(layer)
    images = list(images)
    rows = []
    ids = []
    labels = []
    for start in range(0, len(images), batch):
        chunk = images[start : start + batch]
        xb = np.concatenate(
            [preprocess(img, bundle, mean_override=mean_override) for img in chunk]
        )
        tap = net.forward(xb, taps=(layer,)).taps[layer]
        rows.append(tap.reshape(len(chunk), -1))
        ids.extend(img.id for img in chunk)
        labels.extend(img.label for img in chunk)
    if rows:
        mat = np.concatenate(rows).astype(FLOAT)
    else:
        mat = np.zeros((0, dim), FLOAT)
    return FeatureMatrix(features=mat, ids=ids, labels=labels,
                         layer=layer, source_hash=spec_hash(spec))


def extract_batches(spec: NetworkSpec, bundle: WeightBundle, X, layer,
                    batch=16) -> np.ndarray:
    """Tap the named layer for pre-built input tensors; returns (n, d)."""
    net = Network(spec, bundle)
    X = np.asarray(X, dtype=FLOAT)
    rows = []
    for start in range(0, X.shape[0], batch):
        xb = X[start : start + batch]
        tap = net.forward(xb, taps=(layer,)).taps[layer]
        rows.append(tap.reshape(xb.shape[0], -1))
    if rows:
        return np.concatenate(rows).astype(FLOAT)
    return np.zeros((0, spec.layer_out_dim(layer)), FLOAT)


def take(fm: FeatureMatrix, idx) -> FeatureMatrix:
    """Row subset of a feature matrix, provenance preserved."""
    idx = np.asarray(idx)
    return FeatureMatrix(
        features=fm.features[idx],
        ids=[fm.ids[i] for i in idx],
        labels=[fm.labels[i] for i in idx],
        layer=fm.layer,
        source_hash=fm.source_hash,
    )


def feature_dropout(features, mode="train", seed=0, rate=0.5):
    """Apply the network's dropout convention to a plain feature matrix.

    Train mode zeroes each entry with probability ``rate``; test mode
    multiplies everything by (1 - rate) instead of rescaling the
    surviving entries.
    """
    if rate != 0.5:
        raise DimensionMismatch(f"dropout rate is fixed at 0.5, got {rate}")
    features = np.asarray(features, dtype=FLOAT)
    if mode == "test":
        return features * FLOAT(1.0 - rate)
    rng = np.random.default_rng(seed)
    mask = (rng.random(features.shape) >= rate).astype(FLOAT)
    return features * mask


def random_project(features, target_dim, seed=0):
    """Project rows onto ``target_dim`` seeded Gaussian directions.

    Entries of the projection matrix are N(0, 1/target_dim), which keeps
    inner products approximately unchanged in expectation.
    """
    features = np.asarray(features, dtype=FLOAT)
    if target_dim < 1:
        raise DimensionMismatch(f"target_dim must be positive, got {target_dim}")
    if target_dim > features.shape[1]:
        raise DimensionMismatch(
            f"target_dim {target_dim} exceeds feature dim {features.shape[1]}"
        )
    rng = np.random.default_rng(seed)
    proj = rng.normal(0.0, 1.0 / np.sqrt(target_dim),
                      size=(features.shape[1], target_dim)).astype(FLOAT)
    return features @ proj


# ---------------------------------------------------------------------------
# storage


_MAGIC = b"FMX1"


def _write_str(f, text):
    raw = ("" if text is None else str(text)).encode("utf-8")
    f.write(struct.pack("<I", len(raw)))
    f.write(raw)


def _read_exact(f, n):
    buf = f.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated file: wanted {n} bytes, got {len(buf)}")
    return buf


def _read_str(f):
    (n,) = struct.unpack("<I", _read_exact(f, 4))
    return _read_exact(f, n).decode("utf-8")


def save_features(fm: FeatureMatrix, path):
    """Write the .fmx layout: header, id/label tables, then the f32 block."""
    n, d = fm.features.shape
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<II", n, d))
        _write_str(f, fm.layer)
        _write_str(f, fm.source_hash)
        for i in range(n):
            _write_str(f, fm.ids[i])
        for i in range(n):
            _write_str(f, "" if fm.labels[i] is None else fm.labels[i])
        f.write(np.ascontiguousarray(fm.features, dtype="<f4").tobytes())


def load_features(path) -> FeatureMatrix:
    with open(path, "rb") as f:
        if _read_exact(f, 4) != _MAGIC:
            raise FormatError(f"{path}: bad magic, not an FMX1 feature file")
        n, d = struct.unpack("<II", _read_exact(f, 8))
        layer = _read_str(f)
        source_hash = _read_str(f)
        ids = [_read_str(f) for _ in range(n)]
        labels = [_read_str(f) or None for _ in range(n)]
        mat = np.frombuffer(_read_exact(f, 4 * n * d), dtype="<f4")
    return FeatureMatrix(features=mat.reshape(n, d).copy(), ids=ids,
                         labels=labels, layer=layer, source_hash=source_hash)


def export_csv(fm: FeatureMatrix, path):
    """CSV with header id,label,f0..f{d-1}; floats use shortest round-trip form."""
    n, d = fm.features.shape
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("id,label," + ",".join(f"f{j}" for j in range(d)) + "\n")
        for i in range(n):
            label = "" if fm.labels[i] is None else str(fm.labels[i])
            vals = ",".join(repr(float(v)) for v in fm.features[i])
            f.write(f"{fm.ids[i]},{label},{vals}\n")
