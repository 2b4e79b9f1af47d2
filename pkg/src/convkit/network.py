"""Network specs, weight bundles, image preprocessing, and execution.

A network is described by a line-oriented ``.spec`` text file (one layer
per line) plus a ``.dcf`` binary weight bundle.  This module parses and
validates both, preprocesses images into input tensors (warp to 256x256,
mean-center, center-crop 224x224), runs minibatch forward passes with
named-layer taps, and trains small networks with minibatch SGD.
"""

from __future__ import annotations

import hashlib
import logging
import struct
from dataclasses import dataclass, field

import numpy as np

from . import layers as L
from .errors import (
    DegenerateImage,
    DimensionMismatch,
    Divergence,
    DuplicateName,
    FormatError,
    MissingLayer,
    ParseError,
    ShapeChainError,
    ShapeMismatch,
    UnknownTap,
)
from .tensor import FLOAT, check_finite

log = logging.getLogger("convkit")

LAYER_KINDS = ("conv", "pool", "relu", "lrn", "fc", "dropout", "softmax")

# Stand-in per-channel mean, applied in stored channel order when a bundle
# carries no mean image; override via preprocess(mean_override=...).
DEFAULT_CHANNEL_MEAN = (104.0, 117.0, 123.0)


# ---------------------------------------------------------------------------
# spec documents


@dataclass
class LayerDef:
    name: str
    kind: str
    hyper: dict


@dataclass
class NetworkSpec:
    input_shape: tuple  # (c, h, w)
    layers: list  # of LayerDef, in execution order
    # filled in by validation:
    out_shapes: dict = field(default_factory=dict, compare=False)
    param_shapes: dict = field(default_factory=dict, compare=False)

    def layer_names(self):
        return [l.name for l in self.layers]

    def layer_out_dim(self, name):
        """Flattened per-sample size of the named layer's output."""
        if name not in self.out_shapes:
            raise UnknownTap(f"no layer named {name!r} in spec")
        return int(np.prod(self.out_shapes[name]))


_CONV_KEYS = {"out": int, "kernel": str, "stride": int, "pad": int,
              "act": str, "in": int}
_KEY_TYPES = {
    "conv": _CONV_KEYS,
    "pool": {"window": int, "stride": int},
    "relu": {},
    "lrn": {"size": int, "alpha": float, "beta": float, "k": float},
    "fc": {"out": int, "act": str, "in": int},
    "dropout": {"rate": float},
    "softmax": {},
}
_REQUIRED = {"conv": ("out", "kernel"), "pool": ("window", "stride"),
             "fc": ("out",)}


def _parse_kernel(text, lineno):
    if "x" in text:
        a, _, b = text.partition("x")
    else:
        a = b = text
    try:
        kh, kw = int(a), int(b)
    except ValueError:
        raise ParseError(f"bad kernel spec {text!r}", line=lineno) from None
    return kh, kw


def parse_spec(text: str) -> NetworkSpec:
    """Parse a spec document; raises with the offending line number."""
    input_shape = None
    defs = []
    names = set()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tokens = line.split()
        if tokens[0] == "input":
            if input_shape is not None:
                raise ParseError("duplicate input declaration", line=lineno)
            if len(tokens) != 4:
                raise ParseError("input line needs: input C H W", line=lineno)
            try:
                input_shape = tuple(int(t) for t in tokens[1:])
            except ValueError:
                raise ParseError("input dims must be integers", line=lineno) from None
            if any(d < 1 for d in input_shape):
                raise ParseError("input dims must be positive", line=lineno)
            continue
        if input_shape is None:
            raise ParseError("layer appears before the input declaration", line=lineno)
        if len(tokens) < 2:
            raise ParseError("layer line needs: name kind key=value ...", line=lineno)
        name, kind = tokens[0], tokens[1]
        if kind not in LAYER_KINDS:
            raise ParseError(f"unknown layer kind {kind!r}", line=lineno)
        if name in names:
            raise DuplicateName(f"line {lineno}: two layers named {name!r}")
        names.add(name)
        key_types = _KEY_TYPES[kind]
        kv = {}
        for tok in tokens[2:]:
            key, sep, value = tok.partition("=")
            if not sep:
                raise ParseError(f"expected key=value, got {tok!r}", line=lineno)
            if key not in key_types:
                raise ParseError(f"unknown key {key!r} for kind {kind!r}", line=lineno)
            try:
                kv[key] = key_types[key](value)
            except ValueError:
                raise ParseError(f"bad value for {key!r}: {value!r}", line=lineno) from None
        for req in _REQUIRED.get(kind, ()):
            if req not in kv:
                raise ParseError(f"{kind} layer requires {req}=", line=lineno)
        defs.append(LayerDef(name, kind, _normalize_hyper(kind, kv, lineno)))
    if input_shape is None:
        raise ParseError("spec has no input declaration", line=0)
    spec = NetworkSpec(input_shape=input_shape, layers=defs)
    _validate_chain(spec)
    return spec


def _normalize_hyper(kind, kv, lineno):
    if kind == "conv":
        kh, kw = _parse_kernel(kv["kernel"], lineno)
        h = {"out": kv["out"], "kernel_h": kh, "kernel_w": kw,
             "stride": kv.get("stride", 1), "pad": kv.get("pad", 0),
             "act": kv.get("act", "none")}
        if "in" in kv:
            h["in"] = kv["in"]
        return h
    if kind == "pool":
        return {"window": kv["window"], "stride": kv["stride"]}
    if kind == "lrn":
        return {"size": kv.get("size", 5), "alpha": kv.get("alpha", 1e-4),
                "beta": kv.get("beta", 0.75), "k": kv.get("k", 2.0)}
    if kind == "fc":
        h = {"out": kv["out"], "act": kv.get("act", "none")}
        if "in" in kv:
            h["in"] = kv["in"]
        return h
    if kind == "dropout":
        return {"rate": kv.get("rate", 0.5)}
    return {}


def spec_to_text(spec: NetworkSpec) -> str:
    """Canonical serialization; parse(spec_to_text(s)) == s structurally."""
    lines = ["input {} {} {}".format(*spec.input_shape)]
    for d in spec.layers:
        h = d.hyper
        if d.kind == "conv":
            parts = [f"out={h['out']}", f"kernel={h['kernel_h']}x{h['kernel_w']}",
                     f"stride={h['stride']}", f"pad={h['pad']}", f"act={h['act']}"]
            if "in" in h:
                parts.append(f"in={h['in']}")
        elif d.kind == "pool":
            parts = [f"window={h['window']}", f"stride={h['stride']}"]
        elif d.kind == "lrn":
            parts = [f"size={h['size']}", f"alpha={h['alpha']!r}",
                     f"beta={h['beta']!r}", f"k={h['k']!r}"]
        elif d.kind == "fc":
            parts = [f"out={h['out']}", f"act={h['act']}"]
            if "in" in h:
                parts.append(f"in={h['in']}")
        elif d.kind == "dropout":
            parts = [f"rate={h['rate']!r}"]
        else:
            parts = []
        lines.append(" ".join([d.name, d.kind] + parts))
    return "\n".join(lines) + "\n"


def spec_hash(spec: NetworkSpec) -> str:
    return hashlib.sha256(spec_to_text(spec).encode()).hexdigest()


def load_spec(path) -> NetworkSpec:
    with open(path, "r", encoding="utf-8") as f:
        return parse_spec(f.read())


def _validate_chain(spec: NetworkSpec):
    """Walk the layer chain, recording output and parameter shapes."""
    shape = ("spatial",) + spec.input_shape  # or ("flat", d)
    prev_name = "input"
    for i, d in enumerate(spec.layers):
        h = d.hyper
        if d.kind in ("conv", "pool", "lrn") and shape[0] != "spatial":
            raise ShapeChainError(
                f"{d.name}: needs spatial input but {prev_name} produces a flat vector"
            )
        if d.kind == "conv":
            _, c, ih, iw = shape
            if "in" in h and h["in"] != c:
                raise ShapeChainError(
                    f"{d.name}: declares in={h['in']} but {prev_name} outputs {c} channels"
                )
            try:
                oh = L.conv_out_size(ih, h["pad"], h["kernel_h"], h["stride"])
                ow = L.conv_out_size(iw, h["pad"], h["kernel_w"], h["stride"])
            except DimensionMismatch as e:
                raise ShapeChainError(f"{d.name} applied to {prev_name} output: {e}") from None
            spec.param_shapes[d.name] = (
                (h["out"], c, h["kernel_h"], h["kernel_w"]), (h["out"],))
            shape = ("spatial", h["out"], oh, ow)
        elif d.kind == "pool":
            _, c, ih, iw = shape
            if h["window"] > ih or h["window"] > iw:
                raise ShapeChainError(
                    f"{d.name}: window {h['window']} exceeds {prev_name} output ({ih}, {iw})"
                )
            try:
                oh = L.conv_out_size(ih, 0, h["window"], h["stride"])
                ow = L.conv_out_size(iw, 0, h["window"], h["stride"])
            except DimensionMismatch as e:
                raise ShapeChainError(f"{d.name} applied to {prev_name} output: {e}") from None
            shape = ("spatial", c, oh, ow)
        elif d.kind == "lrn":
            L.LrnParams(h["size"], h["alpha"], h["beta"], h["k"])  # validates
        elif d.kind == "fc":
            d_in = int(np.prod(shape[1:]))
            if "in" in h and h["in"] != d_in:
                raise ShapeChainError(
                    f"{d.name}: declares in={h['in']} but {prev_name} outputs {d_in} values"
                )
            spec.param_shapes[d.name] = ((h["out"], d_in), (h["out"],))
            shape = ("flat", h["out"])
        elif d.kind == "softmax":
            if i != len(spec.layers) - 1:
                raise ShapeChainError(
                    f"{d.name}: softmax must be the terminal layer"
                )
            shape = ("flat", int(np.prod(shape[1:])))
        # relu / dropout: shape unchanged
        spec.out_shapes[d.name] = tuple(shape[1:])
        prev_name = d.name


# ---------------------------------------------------------------------------
# weight bundles (.dcf)


@dataclass
class WeightBundle:
    params: dict  # layer name -> (weights ndarray, bias 1-d ndarray)
    mean_image: np.ndarray | None = None


_MAGIC = b"DCF1"
_MEAN_TAG = b"MEAN"


def _write_u32(f, *vals):
    f.write(struct.pack("<" + "I" * len(vals), *vals))


def _read_exact(f, n):
    buf = f.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated file: wanted {n} bytes, got {len(buf)}")
    return buf


def _read_u32(f, n=1):
    vals = struct.unpack("<" + "I" * n, _read_exact(f, 4 * n))
    return vals[0] if n == 1 else vals


def save_weights(bundle: WeightBundle, path):
    """Write a bundle in the .dcf layout (little-endian, 32-bit floats)."""
    with open(path, "wb") as f:
        f.write(_MAGIC)
        _write_u32(f, len(bundle.params))
        for name, (w, b) in bundle.params.items():
            raw = name.encode("utf-8")
            _write_u32(f, len(raw))
            f.write(raw)
            shape = tuple(w.shape) + (1,) * (4 - w.ndim)
            _write_u32(f, *shape)
            f.write(np.ascontiguousarray(w, dtype="<f4").tobytes())
            _write_u32(f, b.shape[0])
            f.write(np.ascontiguousarray(b, dtype="<f4").tobytes())
        if bundle.mean_image is not None:
            f.write(_MEAN_TAG)
            _write_u32(f, *bundle.mean_image.shape)
            f.write(np.ascontiguousarray(bundle.mean_image, dtype="<f4").tobytes())


def load_weights(path, spec: NetworkSpec | None = None) -> WeightBundle:
    """Read a .dcf file; validates against ``spec`` when given."""
    with open(path, "rb") as f:
        if _read_exact(f, 4) != _MAGIC:
            raise FormatError(f"{path}: bad magic, not a DCF1 weight file")
        count = _read_u32(f)
        params = {}
        for _ in range(count):
            name = _read_exact(f, _read_u32(f)).decode("utf-8")
            shape = _read_u32(f, 4)
            n_w = int(np.prod(shape))
            w = np.frombuffer(_read_exact(f, 4 * n_w), dtype="<f4").reshape(shape)
            n_b = _read_u32(f)
            b = np.frombuffer(_read_exact(f, 4 * n_b), dtype="<f4")
            params[name] = (w, b)
        mean = None
        tag = f.read(4)
        if tag:
            if tag != _MEAN_TAG:
                raise FormatError(f"{path}: unknown trailing block {tag!r}")
            c, h, w_ = _read_u32(f, 3)
            mean = np.frombuffer(
                _read_exact(f, 4 * c * h * w_), dtype="<f4").reshape(c, h, w_)
    bundle = WeightBundle(params=params, mean_image=mean)
    if spec is not None:
        validate_bundle(bundle, spec)
    return bundle


def validate_bundle(bundle: WeightBundle, spec: NetworkSpec):
    """Check every parameterized layer is covered, shapes match, no orphans."""
    for name, (wshape, bshape) in spec.param_shapes.items():
        if name not in bundle.params:
            raise MissingLayer(f"bundle has no weights for layer {name!r}")
        w, b = bundle.params[name]
        # stored arrays are padded to 4-d on disk; drop trailing 1s
        if _shape_compatible(w.shape, wshape):
            w = w.reshape(wshape)
        if tuple(w.shape) != tuple(wshape):
            raise ShapeMismatch(
                f"{name}: weights are {tuple(bundle.params[name][0].shape)}, "
                f"spec needs {tuple(wshape)}"
            )
        if tuple(b.shape) != tuple(bshape):
            raise ShapeMismatch(
                f"{name}: bias is {tuple(b.shape)}, spec needs {tuple(bshape)}"
            )
        bundle.params[name] = (w, b)
    for name in bundle.params:
        if name not in spec.param_shapes:
            raise MissingLayer(f"bundle entry {name!r} matches no spec layer")


def _shape_compatible(stored, expect):
    """True when stored is expect padded with trailing 1s (disk is 4-d)."""
    stored = tuple(stored)
    expect = tuple(expect)
    return stored[: len(expect)] == expect and all(
        s == 1 for s in stored[len(expect):]
    )


def init_weights(spec: NetworkSpec, seed=0, std=0.01) -> WeightBundle:
    """Random-init policy: weights N(0, std^2) drawn in layer order, biases 0."""
    rng = np.random.default_rng(seed)
    params = {}
    for d in spec.layers:
        if d.name in spec.param_shapes:
            wshape, bshape = spec.param_shapes[d.name]
            w = rng.normal(0.0, std, size=wshape).astype(FLOAT)
            params[d.name] = (w, np.zeros(bshape, FLOAT))
    return WeightBundle(params=params)


# ---------------------------------------------------------------------------
# images and preprocessing


@dataclass
class ImageRecord:
    id: str
    pixels: np.ndarray  # (H, W, 3) uint8
    label: str | None = None

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels)
        if self.pixels.dtype != np.uint8:
            raise DegenerateImage(
                f"{self.id}: pixels must be uint8, got {self.pixels.dtype}"
            )
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise DegenerateImage(
                f"{self.id}: expected HxWx3 pixels, got {self.pixels.shape}"
            )
        if self.pixels.shape[0] < 1 or self.pixels.shape[1] < 1:
            raise DegenerateImage(f"{self.id}: zero-sized image")


def read_ppm(path, id=None, label=None) -> ImageRecord:
    """Read a binary (P6) PPM file with 8-bit samples."""
    with open(path, "rb") as f:
        data = f.read()
    fields = []
    pos = 0
    while len(fields) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated PPM header")
        fields.append(data[start:pos])
    if fields[0] != b"P6":
        raise FormatError(f"{path}: not a P6 PPM file")
    try:
        w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    except ValueError:
        raise FormatError(f"{path}: bad PPM header") from None
    if maxval != 255:
        raise FormatError(f"{path}: only maxval 255 is supported")
    pos += 1  # the single whitespace after maxval
    payload = data[pos : pos + w * h * 3]
    if len(payload) != w * h * 3:
        raise FormatError(f"{path}: truncated PPM payload")
    pixels = np.frombuffer(payload, dtype=np.uint8)
    return ImageRecord(id=id or str(path), pixels=pixels.reshape(h, w, 3),
                       label=label)


def write_ppm(path, pixels):
    pixels = np.asarray(pixels, dtype=np.uint8)
    h, w, _ = pixels.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode())
        f.write(pixels.tobytes())


def load_image(path, id=None, label=None) -> ImageRecord:
    """Load PPM natively; other formats go through Pillow when available."""
    text = str(path)
    if text.lower().endswith(".ppm"):
        return read_ppm(path, id=id, label=label)
    try:
        from PIL import Image
    except ImportError:
        raise FormatError(
            f"{path}: only PPM is supported without the optional Pillow decoder"
        ) from None
    try:
        with Image.open(path) as im:
            pixels = np.asarray(im.convert("RGB"))
    except FileNotFoundError:
        raise
    except Exception as e:
        raise FormatError(f"{path}: undecodable image ({e})") from None
    return ImageRecord(id=id or text, pixels=pixels, label=label)


def read_image_list(path):
    """Parse a dataset list file: one ``path<TAB>label`` per line."""
    entries = []
    with open(path, "r", encoding="utf-8") as f:
        for raw in f:
            line = raw.rstrip("\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            img_path, _, label = line.partition("\t")
            entries.append((img_path, label or None))
    return entries


def _bilinear_resize(img, out_h, out_w):
    """Channel-first bilinear resize with half-pixel sample centers."""
    c, h, w = img.shape
    ys = np.clip((np.arange(out_h) + 0.5) * (h / out_h) - 0.5, 0, h - 1)
    xs = np.clip((np.arange(out_w) + 0.5) * (w / out_w) - 0.5, 0, w - 1)
    y0 = np.floor(ys).astype(np.intp)
    x0 = np.floor(xs).astype(np.intp)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0).astype(img.dtype)[None, :, None]
    fx = (xs - x0).astype(img.dtype)[None, None, :]
    top = img[:, y0][:, :, x0] * (1 - fx) + img[:, y0][:, :, x1] * fx
    bot = img[:, y1][:, :, x0] * (1 - fx) + img[:, y1][:, :, x1] * fx
    return top * (1 - fy) + bot * fy


WARP_SIZE = 256
CROP_SIZE = 224


def preprocess(img: ImageRecord, bundle: WeightBundle | None = None,
               mean_override=None) -> np.ndarray:
    """Image -> (1, 3, 224, 224) float tensor.

    Warps to 256x256 ignoring the original aspect ratio, subtracts the
    bundle's mean image (or a per-channel fallback), then takes the center
    224x224 crop.
    """
    px = img.pixels
    if px.shape[0] < 1 or px.shape[1] < 1:
        raise DegenerateImage(f"{img.id}: zero-sized image")
    chw = np.ascontiguousarray(px.transpose(2, 0, 1)).astype(FLOAT)
    warped = _bilinear_resize(chw, WARP_SIZE, WARP_SIZE)
    if mean_override is not None:
        mean = np.asarray(mean_override, dtype=FLOAT)
        if mean.shape == (3,):
            mean = mean[:, None, None]
    elif bundle is not None and bundle.mean_image is not None:
        mean = bundle.mean_image
    else:
        mean = np.asarray(DEFAULT_CHANNEL_MEAN, dtype=FLOAT)[:, None, None]
    warped = warped - mean
    off = (WARP_SIZE - CROP_SIZE) // 2
    crop = warped[:, off : off + CROP_SIZE, off : off + CROP_SIZE]
    return np.ascontiguousarray(crop, dtype=FLOAT)[None]


# ---------------------------------------------------------------------------
# execution


@dataclass
class ForwardPass:
    output: np.ndarray
    taps: dict
    inputs: list | None = None  # per-layer inputs, kept for backward
    states: list | None = None


class Network:
    """Executable pairing of a validated spec and a matching weight bundle."""

    def __init__(self, spec: NetworkSpec, bundle: WeightBundle, checked=False):
        validate_bundle(bundle, spec)
        self.spec = spec
        self.bundle = bundle
        self.checked = checked
        self.layers = []
        for d in spec.layers:
            h = d.hyper
            if d.kind == "conv":
                w, b = bundle.params[d.name]
                p = L.ConvParams(h["out"], w.shape[1], h["kernel_h"], h["kernel_w"],
                                 stride=h["stride"], pad=h["pad"], weights=w, bias=b)
                act = None if h["act"] == "none" else h["act"]
                self.layers.append(L.ConvLayer(d.name, p, act=act))
            elif d.kind == "pool":
                self.layers.append(L.PoolLayer(d.name, L.PoolParams(h["window"], h["stride"])))
            elif d.kind == "relu":
                self.layers.append(L.ReluLayer(d.name))
            elif d.kind == "lrn":
                self.layers.append(L.LrnLayer(
                    d.name, L.LrnParams(h["size"], h["alpha"], h["beta"], h["k"])))
            elif d.kind == "fc":
                w, b = bundle.params[d.name]
                act = None if h["act"] == "none" else h["act"]
                self.layers.append(L.FcLayer(d.name, w, b, act=act))
            elif d.kind == "dropout":
                self.layers.append(L.DropoutLayer(d.name, rate=h["rate"]))
            elif d.kind == "softmax":
                self.layers.append(L.SoftmaxLayer(d.name))

    def forward(self, batch, taps=(), mode="test", rng=None,
                keep_states=False) -> ForwardPass:
        taps = set(taps)
        known = set(self.spec.layer_names())
        unknown = taps - known
        if unknown:
            raise UnknownTap(f"no layer named {sorted(unknown)[0]!r} in spec")
        batch = np.asarray(batch)
        if batch.ndim != 4 or batch.shape[1:] != self.spec.input_shape:
            raise ShapeMismatch(
                f"batch shape {batch.shape} does not match spec input "
                f"(N, {', '.join(map(str, self.spec.input_shape))})"
            )
        ctx = L.ForwardContext(mode=mode, rng=rng)
        x = batch
        tapped = {}
        inputs = [] if keep_states else None
        states = [] if keep_states else None
        for layer in self.layers:
            if keep_states:
                inputs.append(x)
            y, state = layer.forward(x, ctx)
            if keep_states:
                states.append(state)
            if self.checked:
                check_finite(y, f"layer {layer.name}")
            if layer.name in taps:
                tapped[layer.name] = y
            x = y
        return ForwardPass(output=x, taps=tapped, inputs=inputs, states=states)

    def backward(self, fwd: ForwardPass, grad_out):
        """Backprop ``grad_out`` through a pass run with keep_states=True.

        Returns {layer_name: {param_name: grad}} for parameterized layers.
        """
        grads = {}
        g = grad_out
        for layer, x, state in zip(
                reversed(self.layers), reversed(fwd.inputs), reversed(fwd.states)):
            g, param_grads = layer.backward(x, state, g)
            if param_grads:
                grads[layer.name] = param_grads
        return grads


def forward(spec: NetworkSpec, bundle: WeightBundle, batch, taps=()):
    """One pass; returns {name: activation} for taps plus the terminal layer."""
    net = Network(spec, bundle)
    res = net.forward(batch, taps=taps)
    out = dict(res.taps)
    out[spec.layers[-1].name] = res.output
    return out


# ---------------------------------------------------------------------------
# training


@dataclass
class SgdHyper:
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0
    batch: int = 32
    epochs: int = 10
    seed: int = 0


def sgd_train(spec: NetworkSpec, init, dataset, hyper: SgdHyper):
    """Minibatch SGD with momentum on cross-entropy; returns (bundle, losses).

    ``init`` is a WeightBundle or an integer seed for the random-init
    policy.  ``dataset`` is (X, y): an (n, C, H, W) float array and integer
    class indices.  Deterministic for a fixed seed when run single-threaded.
    """
    if spec.layers[-1].kind != "softmax":
        raise ShapeChainError("sgd_train needs a terminal softmax layer")
    X, y = dataset
    X = np.asarray(X, dtype=FLOAT)
    y = np.asarray(y, dtype=np.int64)
    out_dim = spec.layer_out_dim(spec.layers[-1].name)
    if y.min() < 0 or y.max() >= out_dim:
        raise ShapeMismatch(
            f"labels span [{y.min()}, {y.max()}] but the network has {out_dim} outputs"
        )
    if isinstance(init, WeightBundle):
        params = {k: (w.copy(), b.copy()) for k, (w, b) in init.params.items()}
        mean = init.mean_image
    else:
        bundle0 = init_weights(spec, seed=int(init))
        params = bundle0.params
        mean = None
    bundle = WeightBundle(params=params, mean_image=mean)
    net = Network(spec, bundle)
    rng = np.random.default_rng(hyper.seed)

    velocity = {}
    for layer in net.layers:
        for pname, arr in layer.param_arrays().items():
            velocity[(layer.name, pname)] = np.zeros_like(arr)

    n = X.shape[0]
    batch = max(1, min(hyper.batch, n))
    losses = []
    for epoch in range(hyper.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, batch):
            idx = order[start : start + batch]
            xb, yb = X[idx], y[idx]
            fwd = net.forward(xb, mode="train", rng=rng, keep_states=True)
            probs = fwd.output
            p_true = np.maximum(probs[np.arange(len(idx)), yb], 1e-30)
            loss = float(-np.mean(np.log(p_true)))
            total += loss * len(idx)
            # combined softmax + cross-entropy gradient, injected below the
            # terminal softmax layer
            g = probs.copy()
            g[np.arange(len(idx)), yb] -= 1.0
            g /= len(idx)
            trimmed = ForwardPass(output=None, taps={},
                                  inputs=fwd.inputs[:-1], states=fwd.states[:-1])
            sub = Network.__new__(Network)
            sub.layers = net.layers[:-1]
            grads = Network.backward(sub, trimmed, g)
            for layer in net.layers:
                if layer.name not in grads:
                    continue
                arrays = layer.param_arrays()
                for pname in sorted(arrays):
                    g_p = grads[layer.name][pname].astype(FLOAT)
                    if hyper.weight_decay and pname == "weights":
                        g_p = g_p + FLOAT(hyper.weight_decay) * arrays[pname]
                    v = velocity[(layer.name, pname)]
                    v *= FLOAT(hyper.momentum)
                    v -= FLOAT(hyper.lr) * g_p
                    arrays[pname] += v
        epoch_loss = total / n
        if not np.isfinite(epoch_loss):
            raise Divergence("training loss is not finite", epoch=epoch)
        losses.append(epoch_loss)
        log.info("epoch %d: loss %.6f", epoch, epoch_loss)
    return bundle, losses
