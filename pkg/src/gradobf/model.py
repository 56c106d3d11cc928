"""A small numpy convolutional classifier with exact input gradients.

Architectures are dash-separated layer strings, e.g. the reference
``conv8-relu-pool-conv16-relu-pool-dense-softmax``:

* ``conv<F>``  3x3 convolution, stride 1, zero "same" padding, ``F`` filters
* ``relu``     rectifier; subgradient at 0 is 0
* ``pool``     2x2 max pool, stride 2; backward routes to the first maximum in
               scan order (row-major within the window)
* ``dense``    fully connected, flattening its input; a bare ``dense`` maps to
               ``class_count`` outputs, ``dense<N>`` to ``N``
* ``softmax``  must be last

All arrays are batched NHWC float64.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .core import Dataset, Rng

__all__ = [
    "REFERENCE_ARCH",
    "TinyModel",
    "GradResult",
    "model_init",
    "forward",
    "loss_and_input_grad",
    "train",
    "finite_diff_check",
    "accuracy",
    "save_model",
    "load_model",
    "reference_model",
    "zoom_out",
]

REFERENCE_ARCH = "conv8-relu-pool-conv16-relu-pool-dense-softmax"
MAGIC = b"TMDL1"


@dataclass
class GradResult:
    loss: float
    input_grad: np.ndarray


# --------------------------------------------------------------------------- layers


class Conv3x3:
    kind = "conv"

    def __init__(self, filters: int):
        self.filters = filters
        self.w = self.b = None

    def build(self, shape, rng: Rng):
        h, w, c = shape
        self.w = rng.normal(np.sqrt(2.0 / (9 * c)), (3, 3, c, self.filters))
        self.b = np.zeros(self.filters)
        return (h, w, self.filters)

    def params(self):
        return [self.w, self.b]

    def set_params(self, arrays):
        self.w, self.b = arrays
        self.filters = self.w.shape[3]

    def forward(self, x):
        n, h, w, c = x.shape
        xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
        cols = sliding_window_view(xp, (3, 3), axis=(1, 2))  # n,h,w,c,3,3
        cols = cols.transpose(0, 1, 2, 4, 5, 3).reshape(n * h * w, 9 * c)
        y = cols @ self.w.reshape(9 * c, self.filters) + self.b
        return y.reshape(n, h, w, self.filters), (x.shape, cols)

    def backward(self, cache, dy, want_params=False):
        (n, h, w, c), cols = cache
        dy2 = dy.reshape(-1, self.filters)
        dcols = (dy2 @ self.w.reshape(9 * c, self.filters).T).reshape(n, h, w, 3, 3, c)
        dxp = np.zeros((n, h + 2, w + 2, c))
        for ky in range(3):
            for kx in range(3):
                dxp[:, ky : ky + h, kx : kx + w, :] += dcols[:, :, :, ky, kx, :]
        grads = None
        if want_params:
            grads = [(cols.T @ dy2).reshape(self.w.shape), dy2.sum(axis=0)]
        return dxp[:, 1:-1, 1:-1, :], grads


class ReLU:
    kind = "relu"

    def build(self, shape, rng):
        return shape

    def params(self):
        return []

    def set_params(self, arrays):
        pass

    def forward(self, x):
        mask = x > 0
        return np.where(mask, x, 0.0), mask

    def backward(self, mask, dy, want_params=False):
        return np.where(mask, dy, 0.0), [] if want_params else None


class MaxPool2:
    kind = "pool"

    def build(self, shape, rng):
        h, w, c = shape
        if h < 2 or w < 2:
            raise ValueError(f"pool needs at least 2x2 input, got {h}x{w}")
        return (h // 2, w // 2, c)

    def params(self):
        return []

    def set_params(self, arrays):
        pass

    def forward(self, x):
        n, h, w, c = x.shape
        h2, w2 = h // 2, w // 2
        win = (
            x[:, : 2 * h2, : 2 * w2, :]
            .reshape(n, h2, 2, w2, 2, c)
            .transpose(0, 1, 3, 5, 2, 4)
            .reshape(n, h2, w2, c, 4)
        )
        idx = np.argmax(win, axis=-1)  # first maximum on ties
        y = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
        return y, (x.shape, idx)

    def backward(self, cache, dy, want_params=False):
        (n, h, w, c), idx = cache
        h2, w2 = h // 2, w // 2
        onehot = idx[..., None] == np.arange(4)
        dwin = np.where(onehot, dy[..., None], 0.0)
        dx = np.zeros((n, h, w, c))
        dx[:, : 2 * h2, : 2 * w2, :] = (
            dwin.reshape(n, h2, w2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(n, 2 * h2, 2 * w2, c)
        )
        return dx, [] if want_params else None


class Dense:
    kind = "dense"

    def __init__(self, units: int | None):
        self.units = units
        self.w = self.b = None

    def build(self, shape, rng: Rng, *, last=False):
        fan_in = int(np.prod(shape))
        # the output layer uses unit-gain scaling so an untrained net starts near uniform
        gain = 1.0 if last else 2.0
        self.w = rng.normal(np.sqrt(gain / fan_in), (fan_in, self.units))
        self.b = np.zeros(self.units)
        return (self.units,)

    def params(self):
        return [self.w, self.b]

    def set_params(self, arrays):
        self.w, self.b = arrays
        self.units = self.w.shape[1]

    def forward(self, x):
        flat = x.reshape(len(x), -1)
        return flat @ self.w + self.b, (x.shape, flat)

    def backward(self, cache, dy, want_params=False):
        shape, flat = cache
        dx = (dy @ self.w.T).reshape(shape)
        grads = [flat.T @ dy, dy.sum(axis=0)] if want_params else None
        return dx, grads


def _parse_arch(arch: str, class_count: int):
    tokens = [t.strip() for t in arch.strip().split("-")]
    if not tokens or tokens[-1] != "softmax":
        raise ValueError(f"architecture {arch!r} must end in 'softmax'")
    layers = []
    for pos, tok in enumerate(tokens[:-1]):
        if tok.startswith("conv") and tok[4:].isdigit() and int(tok[4:]) > 0:
            layers.append(Conv3x3(int(tok[4:])))
        elif tok == "relu":
            layers.append(ReLU())
        elif tok == "pool":
            layers.append(MaxPool2())
        elif tok == "dense":
            layers.append(Dense(None))
        elif tok.startswith("dense") and tok[5:].isdigit() and int(tok[5:]) > 0:
            layers.append(Dense(int(tok[5:])))
        else:
            raise ValueError(f"architecture {arch!r}: unknown layer token {tok!r} at position {pos}")
    dense = [layer for layer in layers if isinstance(layer, Dense)]
    if not dense or layers[-1] is not dense[-1]:
        raise ValueError(f"architecture {arch!r} must have a dense layer right before softmax")
    if dense[-1].units is None:
        dense[-1].units = class_count
    if dense[-1].units != class_count:
        raise ValueError(f"final dense layer has {dense[-1].units} units, expected {class_count}")
    for layer in dense[:-1]:
        if layer.units is None:
            raise ValueError(f"architecture {arch!r}: only the last dense layer may omit its width")
    return layers


# --------------------------------------------------------------------------- model


def _log_softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


@dataclass
class TinyModel:
    arch: str
    input_shape: tuple
    class_count: int
    layers: list = field(repr=False)

    # -- raw passes
    def forward_cached(self, x):
        caches = []
        for layer in self.layers:
            x, cache = layer.forward(x)
            caches.append(cache)
        return x, caches

    def backward(self, caches, dlogits, want_params=False):
        grads = []
        d = dlogits
        for layer, cache in zip(reversed(self.layers), reversed(caches)):
            d, g = layer.backward(cache, d, want_params)
            grads.append(g)
        grads.reverse()
        return d, grads

    def _check(self, x):
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 3
        if single:
            x = x[None]
        if x.shape[1:] != tuple(self.input_shape):
            raise ValueError(f"input shape {x.shape[1:]} does not match model input {tuple(self.input_shape)}")
        return x, single

    # -- batched API
    def logits(self, x):
        x, single = self._check(x)
        z, _ = self.forward_cached(x)
        return z[0] if single else z

    def probs(self, x):
        return np.exp(_log_softmax(self.logits(x)))

    def predict(self, x):
        return np.argmax(self.logits(x), axis=-1)

    def loss_grad(self, x, labels):
        """Per-sample cross-entropy and its gradient w.r.t. each input."""
        x, single = self._check(x)
        labels = np.atleast_1d(np.asarray(labels))
        z, caches = self.forward_cached(x)
        logp = _log_softmax(z)
        rows = np.arange(len(x))
        loss = -logp[rows, labels]
        dz = np.exp(logp)
        dz[rows, labels] -= 1.0
        dx, _ = self.backward(caches, dz)
        if single:
            return loss[0], dx[0]
        return loss, dx

    def logit_vjp(self, x, dlogits_fn):
        """Gradient of ``sum(dlogits_fn(z) * z)``-style objectives.

        ``dlogits_fn`` receives the logits batch and returns ``(value, dvalue/dz)``;
        returns ``(value, dvalue/dx)``.
        """
        x, single = self._check(x)
        z, caches = self.forward_cached(x)
        value, dz = dlogits_fn(z)
        dx, _ = self.backward(caches, dz)
        return value, (dx[0] if single else dx)

    def parameters(self):
        return [p for layer in self.layers for p in layer.params()]

    def copy(self) -> "TinyModel":
        clone = TinyModel(self.arch, tuple(self.input_shape), self.class_count,
                          _parse_arch(self.arch, self.class_count))
        for dst, src in zip(clone.layers, self.layers):
            dst.set_params([p.copy() for p in src.params()])
        return clone

    def activation_pattern(self, x):
        """ReLU masks and pool routes; equal patterns mean no kink lies between inputs."""
        x, _ = self._check(x)
        pattern = []
        for layer in self.layers:
            x, cache = layer.forward(x)
            if isinstance(layer, ReLU):
                pattern.append(cache)
            elif isinstance(layer, MaxPool2):
                pattern.append(cache[1])
        return pattern


def model_init(arch_spec: str, rng: Rng, input_shape=(32, 32, 3), class_count: int = 4) -> TinyModel:
    layers = _parse_arch(arch_spec, class_count)
    shape = tuple(input_shape)
    last_dense = [layer for layer in layers if isinstance(layer, Dense)][-1]
    for i, layer in enumerate(layers):
        sub = rng.child(f"layer{i}")
        if isinstance(layer, Dense):
            shape = layer.build(shape, sub, last=layer is last_dense)
        else:
            shape = layer.build(shape, sub)
    return TinyModel(arch_spec, tuple(input_shape), class_count, layers)


def forward(model: TinyModel, img) -> np.ndarray:
    """Class probabilities for one ``(H, W, C)`` image."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3:
        raise ValueError(f"expected a single (H, W, C) image, got shape {img.shape}")
    return model.probs(img)


def loss_and_input_grad(model: TinyModel, img, label: int) -> GradResult:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3:
        raise ValueError(f"expected a single (H, W, C) image, got shape {img.shape}")
    loss, grad = model.loss_grad(img, label)
    return GradResult(float(loss), grad)


def accuracy(model: TinyModel, data: Dataset, batch: int = 256) -> float:
    if len(data) == 0:
        raise ValueError("empty dataset")
    hits = 0
    for start in range(0, len(data), batch):
        pred = model.predict(data.images[start : start + batch])
        hits += int(np.sum(pred == data.labels[start : start + batch]))
    return hits / len(data)


def mean_loss(model: TinyModel, data: Dataset, batch: int = 256) -> float:
    total = 0.0
    for start in range(0, len(data), batch):
        loss, _ = model.loss_grad(data.images[start : start + batch], data.labels[start : start + batch])
        total += float(loss.sum())
    return total / len(data)


def zoom_out(x: np.ndarray, rng: Rng, min_scale: float = 0.7, prob: float = 0.5) -> np.ndarray:
    """Training augmentation: shrink some images onto a flat random-grey canvas.

    Each image in the batch is picked with probability ``prob``; a picked image
    is bilinearly resized to ``round(z * side)`` for ``z ~ U(min_scale, 1)``,
    placed at a random integer offset and surrounded by a constant in
    ``[0.3, 0.7]``.  This gives the classifier the mild scale and border
    tolerance that large pre-trained models get from their own augmentation.
    """
    from .preprocess import bilinear_matrix

    n, h, w = x.shape[:3]
    out = np.array(x, dtype=np.float64, copy=True)
    picked = np.nonzero(rng.uniform_f64(n) < prob)[0]
    if len(picked) == 0:
        return out
    ly = np.zeros((len(picked), h, h))
    lx = np.zeros((len(picked), w, w))
    fill = np.empty(len(picked))
    for j in range(len(picked)):
        z = rng.uniform(min_scale, 1.0)
        ch, cw = int(round(z * h)), int(round(z * w))
        oy, ox = rng.integers(0, h - ch + 1), rng.integers(0, w - cw + 1)
        ly[j, oy : oy + ch] = bilinear_matrix(ch, h)
        lx[j, ox : ox + cw] = bilinear_matrix(cw, w)
        fill[j] = rng.uniform(0.3, 0.7)
    rows = np.einsum("bij,bjkc->bikc", ly, out[picked])
    body = np.einsum("bikc,blk->bilc", rows, lx)
    cover = np.einsum("bi,bl->bil", ly.sum(2), lx.sum(2))
    out[picked] = body + (fill[:, None, None] * (1.0 - cover))[..., None]
    return out


def train(model: TinyModel, data: Dataset, epochs: int, lr: float, rng: Rng,
          batch_size: int = 32, momentum: float = 0.9, augment=None,
          label_smoothing: float = 0.0, log=None) -> TinyModel:
    """Minibatch SGD with heavy-ball momentum on mean cross-entropy.

    Returns a trained copy.  Epoch ``e`` shuffles with ``rng.child(f"epoch{e}")``
    so the result depends only on the inputs and the stream identity.
    ``augment(batch, rng)``, if given, transforms each minibatch using the
    epoch's ``"augment"`` child stream.  ``label_smoothing`` moves that much
    target mass from the true class to a uniform spread over all classes.
    """
    if len(data) == 0:
        raise ValueError("cannot train on an empty dataset")
    model = model.copy()
    velocity = [np.zeros_like(p) for p in model.parameters()]
    for epoch in range(epochs):
        stream = rng.child(f"epoch{epoch}")
        order = stream.permutation(len(data))
        aug_rng = stream.child("augment")
        for start in range(0, len(order), batch_size):
            idx = order[start : start + batch_size]
            x, y = data.images[idx], data.labels[idx]
            if augment is not None:
                x = augment(x, aug_rng)
            z, caches = model.forward_cached(x)
            dz = np.exp(_log_softmax(z)) - label_smoothing / model.class_count
            dz[np.arange(len(idx)), y] -= 1.0 - label_smoothing
            dz /= len(idx)
            _, grads = model.backward(caches, dz, want_params=True)
            flat = [gp for g in grads for gp in g]
            for p, gp, v in zip(model.parameters(), flat, velocity):
                v *= momentum
                v += gp
                p -= lr * v
        if log is not None:
            log(epoch, model)
    return model


def finite_diff_check(model: TinyModel, img, label: int, h: float, samples: int, rng: Rng,
                      floor: float = 1e-7) -> float:
    """Max relative error of the analytic input gradient against central differences.

    Error at a pixel is ``|a - n| / max(|a|, |n|, floor)``.  Pixels whose
    ``+-h`` probes land on different ReLU/pool patterns straddle a kink, where
    the derivative is undefined; they are replaced by fresh draws.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    img = np.asarray(img, dtype=np.float64)
    _, grad = model.loss_grad(img, label)
    flat = img.ravel()
    order = rng.permutation(flat.size)
    worst, used = 0.0, 0
    for pos in order:
        if used >= samples:
            break
        plus, minus = flat.copy(), flat.copy()
        plus[pos] += h
        minus[pos] -= h
        plus, minus = plus.reshape(img.shape), minus.reshape(img.shape)
        pat_p = model.activation_pattern(plus)
        pat_m = model.activation_pattern(minus)
        pat_0 = model.activation_pattern(img)
        if not all(np.array_equal(a, b) and np.array_equal(a, c) for a, b, c in zip(pat_p, pat_m, pat_0)):
            continue
        lp, _ = model.loss_grad(plus, label)
        lm, _ = model.loss_grad(minus, label)
        numeric = (lp - lm) / (2.0 * h)
        analytic = grad.ravel()[pos]
        err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)
        worst = max(worst, err)
        used += 1
    return float(worst)


# --------------------------------------------------------------------------- persistence
# Layout (all little-endian):
#   b"TMDL1"
#   u32 len + utf-8 architecture string
#   3 x u32 input shape, u32 class_count, u32 layer count
#   per layer: u64 record length, then
#       u32 len + ascii layer kind, u32 array count,
#       per array: u32 ndim, ndim x u32 dims, float64 data


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def save_model(model: TinyModel, path) -> None:
    out = io.BytesIO()
    out.write(MAGIC)
    out.write(_pack_str(model.arch))
    out.write(struct.pack("<4I", *model.input_shape, model.class_count))
    out.write(struct.pack("<I", len(model.layers)))
    for layer in model.layers:
        rec = io.BytesIO()
        rec.write(_pack_str(layer.kind))
        arrays = layer.params()
        rec.write(struct.pack("<I", len(arrays)))
        for arr in arrays:
            rec.write(struct.pack("<I", arr.ndim))
            rec.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            rec.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        body = rec.getvalue()
        out.write(struct.pack("<Q", len(body)))
        out.write(body)
    Path(path).write_bytes(out.getvalue())


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise ValueError("model file truncated")
        chunk = self.buf[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self) -> str:
        (n,) = self.unpack("<I")
        return self.take(n).decode("utf-8")


def load_model(path) -> TinyModel:
    r = _Reader(Path(path).read_bytes())
    if r.take(len(MAGIC)) != MAGIC:
        raise ValueError(f"{path}: not a TMDL1 model file")
    arch = r.string()
    h, w, c, k = r.unpack("<4I")
    (count,) = r.unpack("<I")
    layers = _parse_arch(arch, k)
    if count != len(layers):
        raise ValueError(f"{path}: {count} layer records but architecture has {len(layers)}")
    for layer in layers:
        (length,) = r.unpack("<Q")
        rec = _Reader(r.take(length))
        kind = rec.string()
        if kind != layer.kind:
            raise ValueError(f"{path}: layer record {kind!r} where {layer.kind!r} expected")
        (n_arrays,) = rec.unpack("<I")
        arrays = []
        for _ in range(n_arrays):
            (ndim,) = rec.unpack("<I")
            dims = rec.unpack(f"<{ndim}I")
            size = int(np.prod(dims)) if dims else 1
            arrays.append(np.frombuffer(rec.take(8 * size), dtype="<f8").astype(np.float64).reshape(dims))
        layer.set_params(arrays)
    return TinyModel(arch, (h, w, c), k, layers)


REFERENCE_WEIGHTS = Path(__file__).parent / "data" / "reference.tmdl"


def reference_model() -> TinyModel:
    """The shipped reference model (see ``gradobf.harness.REFERENCE_TRAINING``)."""
    return load_model(REFERENCE_WEIGHTS)
