"""Feature extraction, dropout/projection transforms, and the .fmx format."""

import numpy as np
import pytest

from convkit.errors import DimensionMismatch, FormatError, UnknownTap
from convkit.features import (
    FeatureMatrix,
    export_csv,
    extract,
    extract_batches,
    feature_dropout,
    load_features,
    random_project,
    save_features,
    take,
)
from convkit.network import (
    ImageRecord,
    Network,
    init_weights,
    parse_spec,
    spec_hash,
)

# a full-size input spec kept cheap with an aggressive first stride
WIDE_SPEC = """\
input 3 224 224
c1 conv out=4 kernel=8x8 stride=8 act=relu
f1 fc out=6 act=relu
f2 fc out=3
sm softmax
"""


@pytest.fixture(scope="module")
def wide():
    spec = parse_spec(WIDE_SPEC)
    return spec, init_weights(spec, seed=0, std=0.05)


def make_images(n, seed=0):
    rng = np.random.default_rng(seed)
    return [
        ImageRecord(
            id=f"img{i:03d}",
            label=("even" if i % 2 == 0 else "odd"),
            pixels=rng.integers(0, 256, (32, 48, 3), dtype=np.uint8),
        )
        for i in range(n)
    ]


# ---------------------------------------------------------------------------
# FeatureMatrix


def test_feature_matrix_validates():
    with pytest.raises(DimensionMismatch):
        FeatureMatrix(features=np.zeros(4), ids=["a"], labels=["x"])
    with pytest.raises(DimensionMismatch):
        FeatureMatrix(features=np.zeros((2, 3)), ids=["a"], labels=["x", "y"])


def test_feature_matrix_casts_to_float32():
    fm = FeatureMatrix(np.ones((2, 2), dtype=np.float64), ["a", "b"], [None, None])
    assert fm.features.dtype == np.float32
    assert fm.dim == 2
    assert fm.label_array().dtype == object


# ---------------------------------------------------------------------------
# extraction


def test_extract_rows_keep_input_order(wide):
    spec, bundle = wide
    images = make_images(5)
    fm = extract(spec, bundle, images, "f1", batch=2)
    assert fm.features.shape == (5, 6)
    assert fm.ids == [img.id for img in images]
    assert fm.labels == [img.label for img in images]
    assert fm.layer == "f1"
    assert fm.source_hash == spec_hash(spec)


def test_extract_empty_input_resolves_dim(wide):
    spec, bundle = wide
    fm = extract(spec, bundle, [], "f1")
    assert fm.features.shape == (0, 6)
    fm = extract(spec, bundle, [], "c1")
    assert fm.features.shape == (0, 4 * 28 * 28)


def test_extract_batch_size_invariance_within_tolerance(wide):
    # BLAS blocking differs with the batch row count, so equality holds to
    # 1e-5, not bit-exactly
    spec, bundle = wide
    images = make_images(7, seed=1)
    a = extract(spec, bundle, images, "f1", batch=2)
    b = extract(spec, bundle, images, "f1", batch=16)
    np.testing.assert_allclose(a.features, b.features, rtol=1e-5, atol=1e-5)


def test_extract_is_deterministic(wide):
    spec, bundle = wide
    images = make_images(3, seed=2)
    a = extract(spec, bundle, images, "f1")
    b = extract(spec, bundle, images, "f1")
    assert a.features.tobytes() == b.features.tobytes()


def test_extract_post_activation_is_nonnegative(wide):
    # tapping a layer with an inline relu sees the rectified values
    spec, bundle = wide
    fm = extract(spec, bundle, make_images(4, seed=3), "f1")
    assert (fm.features >= 0).all()
    assert (fm.features > 0).any()


def test_extract_unknown_layer(wide):
    spec, bundle = wide
    with pytest.raises(UnknownTap):
        extract(spec, bundle, make_images(1), "fc99")


def test_extract_batches_matches_direct_tap(tiny_spec):
    bundle = init_weights(tiny_spec, seed=0, std=0.1)
    rng = np.random.default_rng(4)
    X = rng.standard_normal((5, 3, 16, 16)).astype(np.float32)
    got = extract_batches(tiny_spec, bundle, X, "f1", batch=2)
    want = Network(tiny_spec, bundle).forward(X, taps=("f1",)).taps["f1"]
    np.testing.assert_allclose(got, want, rtol=1e-5, atol=1e-5)
    whole = extract_batches(tiny_spec, bundle, X, "f1", batch=16)
    np.testing.assert_array_equal(whole, want)
    assert extract_batches(tiny_spec, bundle, X[:0], "f1").shape == (0, 24)


def test_take_subsets_rows(wide):
    spec, bundle = wide
    fm = extract(spec, bundle, make_images(5, seed=5), "f1")
    sub = take(fm, [3, 0])
    np.testing.assert_array_equal(sub.features, fm.features[[3, 0]])
    assert sub.ids == [fm.ids[3], fm.ids[0]]
    assert sub.labels == [fm.labels[3], fm.labels[0]]
    assert sub.layer == fm.layer and sub.source_hash == fm.source_hash


# ---------------------------------------------------------------------------
# dropout on features


def test_feature_dropout_test_mode_halves_exactly():
    x = np.array([[2.0, 4.0], [-6.0, 0.0]], dtype=np.float32)
    out = feature_dropout(x, mode="test")
    np.testing.assert_array_equal(out, [[1.0, 2.0], [-3.0, 0.0]])


def test_feature_dropout_train_mode():
    x = np.ones((40, 50), dtype=np.float32)
    a = feature_dropout(x, mode="train", seed=0)
    b = feature_dropout(x, mode="train", seed=0)
    c = feature_dropout(x, mode="train", seed=1)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)
    assert set(np.unique(a)) == {0.0, 1.0}
    assert abs(a.mean() - 0.5) < 0.05


def test_feature_dropout_zero_matrix():
    out = feature_dropout(np.zeros((3, 3)), mode="train", seed=2)
    np.testing.assert_array_equal(out, np.zeros((3, 3)))


def test_feature_dropout_rate_fixed():
    with pytest.raises(DimensionMismatch):
        feature_dropout(np.ones((2, 2)), rate=0.4)


# ---------------------------------------------------------------------------
# random projection


def test_random_project_shape_and_determinism():
    rng = np.random.default_rng(6)
    x = rng.standard_normal((10, 64)).astype(np.float32)
    a = random_project(x, 16, seed=0)
    b = random_project(x, 16, seed=0)
    c = random_project(x, 16, seed=1)
    assert a.shape == (10, 16)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)


def test_random_project_zero_rows_stay_zero():
    x = np.zeros((3, 32), dtype=np.float32)
    np.testing.assert_array_equal(random_project(x, 8, seed=0), np.zeros((3, 8)))


def test_random_project_rejects_bad_target():
    x = np.ones((2, 16), dtype=np.float32)
    with pytest.raises(DimensionMismatch):
        random_project(x, 17)
    with pytest.raises(DimensionMismatch):
        random_project(x, 0)


def test_random_project_preserves_norms_on_average():
    # E|Px|^2 = |x|^2 under the 1/target_dim entry variance; a wrong scale
    # would shift the observed mean ratio by the square of the factor
    rng = np.random.default_rng(7)
    x = rng.standard_normal((1, 64)).astype(np.float32)
    truth = float((x**2).sum())
    ratios = [
        float((random_project(x, 16, seed=s) ** 2).sum()) / truth
        for s in range(1000)
    ]
    assert abs(np.mean(ratios) - 1.0) <= 0.05


def test_random_project_preserves_inner_products_on_average():
    # use strongly correlated vectors so the estimator noise is small next
    # to the true inner product
    rng = np.random.default_rng(7)
    x = rng.standard_normal(64)
    y = x + 0.1 * rng.standard_normal(64)
    truth = float(x @ y)
    pair = np.stack([x, y]).astype(np.float32)
    dots = [
        float(np.prod(random_project(pair, 16, seed=s), axis=0).sum())
        for s in range(2000)
    ]
    assert abs(np.mean(dots) - truth) <= 0.05 * abs(truth)


# ---------------------------------------------------------------------------
# .fmx files


def test_fmx_round_trip(tmp_path):
    rng = np.random.default_rng(8)
    fm = FeatureMatrix(
        features=rng.standard_normal((4, 3)).astype(np.float32),
        ids=["a", "b", "c", "d"],
        labels=["cat", None, "dog", "cat"],
        layer="f1",
        source_hash="abc123",
    )
    path = tmp_path / "f.fmx"
    save_features(fm, path)
    back = load_features(path)
    assert back.features.tobytes() == fm.features.tobytes()
    assert back.ids == fm.ids
    assert back.labels == fm.labels
    assert back.layer == "f1" and back.source_hash == "abc123"


def test_fmx_save_load_save_is_byte_identical(tmp_path):
    rng = np.random.default_rng(9)
    fm = FeatureMatrix(rng.standard_normal((3, 5)).astype(np.float32),
                       ids=["x", "y", "z"], labels=["1", "2", "3"])
    p1, p2 = tmp_path / "a.fmx", tmp_path / "b.fmx"
    save_features(fm, p1)
    save_features(load_features(p1), p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_fmx_bad_magic(tmp_path):
    path = tmp_path / "bad.fmx"
    path.write_bytes(b"XXXX" + bytes(32))
    with pytest.raises(FormatError):
        load_features(path)


def test_fmx_truncation(tmp_path):
    fm = FeatureMatrix(np.ones((2, 4), np.float32), ["a", "b"], ["x", "y"])
    path = tmp_path / "t.fmx"
    save_features(fm, path)
    blob = path.read_bytes()
    path.write_bytes(blob[:-5])
    with pytest.raises(FormatError):
        load_features(path)


def test_export_csv_frozen(tmp_path):
    fm = FeatureMatrix(
        features=np.array([[1.5, -2.0], [0.25, 3.0]], dtype=np.float32),
        ids=["a", "b"],
        labels=["cat", None],
    )
    path = tmp_path / "f.csv"
    export_csv(fm, path)
    assert path.read_text() == (
        "id,label,f0,f1\n"
        "a,cat,1.5,-2.0\n"
        "b,,0.25,3.0\n"
    )
