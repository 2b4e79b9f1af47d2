"""Shared reference implementations and fixtures for the test suite.

The reference kernels here are written straight from the mathematical
definitions with explicit Python loops.  They are deliberately slow and
share no code with the package, so agreement between the two is evidence
for both.
"""

import numpy as np
import pytest


def direct_conv(x, w, b, stride, pad):
    """Convolution from the definition: nested loops over every output cell."""
    n, c, h, wd = x.shape
    k, _, r, s = w.shape
    xp = np.pad(x.astype(np.float64),
                ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oh = (h + 2 * pad - r) // stride + 1
    ow = (wd + 2 * pad - s) // stride + 1
    out = np.zeros((n, k, oh, ow))
    w64 = w.astype(np.float64)
    for ni in range(n):
        for ki in range(k):
            for oi in range(oh):
                for oj in range(ow):
                    acc = 0.0
                    for ci in range(c):
                        patch = xp[ni, ci,
                                   oi * stride : oi * stride + r,
                                   oj * stride : oj * stride + s]
                        acc += float(np.sum(patch * w64[ki, ci]))
                    out[ni, ki, oi, oj] = acc + float(b[ki])
    return out


def direct_maxpool(x, window, stride):
    n, c, h, w = x.shape
    oh = (h - window) // stride + 1
    ow = (w - window) // stride + 1
    out = np.zeros((n, c, oh, ow), dtype=x.dtype)
    for ni in range(n):
        for ci in range(c):
            for oi in range(oh):
                for oj in range(ow):
                    patch = x[ni, ci,
                              oi * stride : oi * stride + window,
                              oj * stride : oj * stride + window]
                    out[ni, ci, oi, oj] = patch.max()
    return out


def direct_lrn(x, size, alpha, beta, k):
    """Channel-window divisive normalization, one channel at a time."""
    n, c, h, w = x.shape
    x64 = x.astype(np.float64)
    out = np.zeros_like(x64)
    half = size // 2
    for ci in range(c):
        lo = max(0, ci - half)
        hi = min(c, ci + half + 1)
        ssum = (x64[:, lo:hi] ** 2).sum(axis=1)
        out[:, ci] = x64[:, ci] / (k + (alpha / size) * ssum) ** beta
    return out


def numeric_grad(f, x, flat_indices, step=1e-5):
    """Central differences of scalar f at selected coordinates of x."""
    grads = np.zeros(len(flat_indices))
    for j, i in enumerate(flat_indices):
        xp = x.copy()
        xp.flat[i] += step
        xm = x.copy()
        xm.flat[i] -= step
        grads[j] = (f(xp) - f(xm)) / (2.0 * step)
    return grads


def grad_rel_err(analytic, numeric):
    """Relative error with a unit floor, elementwise."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    return np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))


TINY_SPEC = """\
input 3 16 16
c1 conv out=6 kernel=3x3 stride=1 pad=1 act=relu
p1 pool window=2 stride=2
c2 conv out=8 kernel=3x3 stride=1 pad=1 act=relu
p2 pool window=2 stride=2
f1 fc out=24 act=relu
f2 fc out=2
sm softmax
"""


@pytest.fixture
def tiny_spec():
    from convkit.network import parse_spec

    return parse_spec(TINY_SPEC)


def two_class_images(n_per_class, rng, size=16):
    """Seeded 2-class toy images: opposing diagonal bars plus noise."""
    xs = []
    ys = []
    for c in range(2):
        base = np.zeros((3, size, size), np.float32)
        for i in range(size):
            j = i if c == 0 else size - 1 - i
            base[:, i, max(0, j - 1) : j + 2] = 2.0
        for _ in range(n_per_class):
            noise = rng.normal(0.0, 0.35, (3, size, size)).astype(np.float32)
            xs.append(base + noise)
            ys.append(c)
    return np.stack(xs), np.array(ys)


# ---------------------------------------------------------------------------
# acceptance reporting: one line per criterion in the terminal summary


_ACCEPTANCE = []


def pytest_runtest_logreport(report):
    if report.when == "call" and "test_acceptance" in report.nodeid:
        name = report.nodeid.split("::")[-1]
        if name.startswith("test_"):
            name = name[len("test_"):]
        _ACCEPTANCE.append((name, report.outcome))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.write_sep("-", "acceptance criteria")
    for name, outcome in _ACCEPTANCE:
        status = {"passed": "PASS", "failed": "FAIL"}.get(outcome,
                                                          outcome.upper())
        terminalreporter.write_line(f"{status} {name}")
