"""Input-preprocessing defenses and their composition.

Every transform is a :class:`Preprocessor`.  Calling ``draw(img, rng)`` returns
the transformed image together with a vector-Jacobian product for the *realised*
transform (``None`` for non-differentiable stages).  Attacks use the VJP to
back-propagate through differentiable randomised stages (EOT) and substitute a
surrogate for the others (BPDA).

Pipeline strings, as accepted by :func:`parse_pipeline`::

    identity
    fd | fd(q=10) | fd(low=8,high=60,t=4) | fdx3
    rdg | rdg(delta=0.15,d=4,corner=random)
    rand | rand(max=1.104,pad=1.338,value=0.5)
    bitdepth(3)
    crop(0.75)

joined with ``+`` and applied left to right, e.g. ``fd+rdg`` or ``fdx3+rdg``.
A bare ``fd`` uses the luminance table at quality ``DEFAULT_FD_QUALITY``;
giving ``low``/``high``/``t`` selects the two-level table instead.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .core import Rng

__all__ = [
    "Preprocessor",
    "RdgParams",
    "RandLayerParams",
    "QuantTable",
    "JPEG_LUMINANCE",
    "DEFAULT_FD_QUALITY",
    "rdg_apply",
    "rdg_draw",
    "rdg_remap",
    "rand_layer_apply",
    "fd_apply",
    "bit_depth_reduce",
    "random_crop",
    "compose",
    "identity",
    "fd",
    "rdg",
    "rand_layer",
    "bitdepth",
    "crop",
    "parse_pipeline",
    "PipelineError",
    "bilinear_matrix",
    "dct_matrix",
]

Vjp = Optional[Callable[[np.ndarray], np.ndarray]]


@dataclass(frozen=True)
class Preprocessor:
    """A transform ``g`` with its differentiability and randomness flags.

    ``stages`` holds the leaf transforms of a composition (a leaf lists itself).
    """

    name: str
    draw: Callable[[np.ndarray, Optional[Rng]], tuple] = field(repr=False)
    differentiable: bool
    randomized: bool
    stages: tuple = field(default=(), repr=False)

    def __post_init__(self):
        if not self.stages:
            object.__setattr__(self, "stages", (self,))

    def apply(self, img, rng: Optional[Rng] = None) -> np.ndarray:
        if self.randomized and rng is None:
            raise ValueError(f"{self.name} is randomized and needs an Rng")
        return self.draw(np.asarray(img, dtype=np.float64), rng)[0]

    __call__ = apply


def _square_side(img) -> int:
    h, w = img.shape[:2]
    if h != w:
        raise ValueError(f"transform needs a square image, got {h}x{w}")
    return h


def _identity_vjp(g):
    return g


identity = Preprocessor("identity", lambda img, rng: (img, _identity_vjp), True, False)


# --------------------------------------------------------------------------- RDG


@dataclass(frozen=True)
class RdgParams:
    distortion_limit: float = 0.15
    grid_size: Optional[int] = None  # None: round(side / 8)
    corner_policy: str = "random-corner"

    def __post_init__(self):
        if not 0.0 <= self.distortion_limit <= 1.0:
            raise ValueError("distortion_limit must lie in [0, 1]")
        if self.grid_size is not None and self.grid_size < 2:
            raise ValueError("grid_size must be at least 2")
        if self.corner_policy not in ("random-corner", "fixed-upper-left"):
            raise ValueError(f"unknown corner_policy {self.corner_policy!r}")

    def grid_for(self, h: int, w: int) -> int:
        d = self.grid_size if self.grid_size is not None else max(2, int(round(min(h, w) / 8)))
        if d >= min(h, w):
            raise ValueError(f"grid_size {d} must be smaller than the image side {min(h, w)}")
        return d


def _rdg_axis(length: int, d: int, deltas: np.ndarray):
    """Source index per destination pixel along one axis, and its validity."""
    count = length // d
    bounds = np.concatenate([[0.0], np.cumsum(d * (1.0 + deltas[:count]))])
    dest = np.arange(count * d)
    cell, t = np.divmod(dest, d)
    lo, hi = bounds[cell], bounds[cell + 1]
    src = lo + (t + 0.5) * (hi - lo) / d - 0.5
    idx = np.floor(src + 0.5).astype(np.int64)
    # destination beyond count*d is stage-4 padding
    idx = np.concatenate([idx, np.full(length - count * d, -1)])
    valid = (idx >= 0) & (idx < length)
    return np.where(valid, idx, 0), valid


def rdg_remap(img: np.ndarray, d: int, dx: np.ndarray, dy: np.ndarray):
    """Upper-left-anchored RDG for given per-boundary offsets.

    ``dx[m-1]`` stretches column cell ``m`` and ``dy[n-1]`` row cell ``n``.  Each
    distorted source cell is resampled (nearest neighbour) onto the fixed
    ``d x d`` destination cell; anything sampled outside the source image and any
    destination area past the last full cell is zero.

    Returns ``(out, vjp)``.
    """
    h, w = img.shape[:2]
    ri, rv = _rdg_axis(h, d, np.asarray(dy, dtype=np.float64))
    ci, cv = _rdg_axis(w, d, np.asarray(dx, dtype=np.float64))
    keep = (rv[:, None] & cv[None, :])[..., None]
    out = np.where(keep, img[ri[:, None], ci[None, :]], 0.0)
    flat_src = (ri[:, None] * w + ci[None, :]).ravel()

    def vjp(g):
        g = np.where(keep, g, 0.0).reshape(h * w, -1)
        grad = np.zeros_like(g)
        np.add.at(grad, flat_src, g)
        return grad.reshape(img.shape)

    return out, vjp


_FLIPS = ((False, False), (False, True), (True, False), (True, True))  # (rows, cols) per corner


def rdg_draw(img: np.ndarray, params: RdgParams, rng: Rng):
    """RDG with its routing VJP.  Draw order: corner (random-corner only), then
    one ``(dx, dy)`` pair per grid boundary."""
    h, w = img.shape[:2]
    d = params.grid_for(h, w)
    flip_r = flip_c = False
    if params.corner_policy == "random-corner":
        flip_r, flip_c = _FLIPS[int(rng.integers(0, 4))]
    n = max(h // d, w // d)
    draws = rng.uniform(-params.distortion_limit, params.distortion_limit, (n, 2))
    rs = slice(None, None, -1) if flip_r else slice(None)
    cs = slice(None, None, -1) if flip_c else slice(None)
    out, inner = rdg_remap(img[rs, cs], d, draws[:, 0], draws[:, 1])

    def vjp(g):
        return inner(g[rs, cs])[rs, cs]

    return out[rs, cs], vjp


def rdg_apply(img, params: RdgParams, rng: Rng) -> np.ndarray:
    return rdg_draw(np.asarray(img, dtype=np.float64), params, rng)[0]


# --------------------------------------------------------------------------- resampling


def bilinear_matrix(out_size: int, in_size: int) -> np.ndarray:
    """Half-pixel-centred bilinear resampling as an ``(out, in)`` matrix."""
    scale = in_size / out_size
    src = np.clip((np.arange(out_size) + 0.5) * scale - 0.5, 0.0, in_size - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, in_size - 1)
    frac = src - i0
    mat = np.zeros((out_size, in_size))
    rows = np.arange(out_size)
    np.add.at(mat, (rows, i0), 1.0 - frac)
    np.add.at(mat, (rows, i1), frac)
    return mat


def _separable(img, ly, lx, const=None):
    out = np.einsum("ij,jkc,lk->ilc", ly, img, lx)
    if const is not None:
        out = out + const[..., None]
    out = np.clip(out, 0.0, 1.0)

    def vjp(g):
        return np.einsum("ij,ilc,lk->jkc", ly, g, lx)

    return out, vjp


# --------------------------------------------------------------------------- randomization layer


@dataclass(frozen=True)
class RandLayerParams:
    rescale_max_ratio: float = 1.104
    pad_ratio: float = 1.338
    pad_value: float = 0.5

    def __post_init__(self):
        if not 1.0 < self.rescale_max_ratio < self.pad_ratio:
            raise ValueError("need 1 < rescale_max_ratio < pad_ratio")
        if not 0.0 <= self.pad_value <= 1.0:
            raise ValueError("pad_value must lie in [0, 1]")


def _floor_ratio(ratio: float, s: int) -> int:
    # tolerate representation error in ratio * s landing just under an integer
    return int(math.floor(ratio * s + 1e-9))


def rand_layer_draw(img: np.ndarray, params: RandLayerParams, rng: Rng, offset=None):
    """Rescale to a random ``r``, place on a ``p x p`` canvas, rescale back.

    Draw order: ``r`` then the row and column offsets.  ``offset`` pins the
    placement (testing only).
    """
    s = _square_side(img)
    r_max = _floor_ratio(params.rescale_max_ratio, s)
    p = _floor_ratio(params.pad_ratio, s)
    r = int(rng.integers(s, r_max + 1))
    r = min(r, p)
    if offset is None:
        oy = int(rng.integers(0, p - r + 1))
        ox = int(rng.integers(0, p - r + 1))
    else:
        oy, ox = offset
    down = bilinear_matrix(s, p)
    up = bilinear_matrix(r, s)
    ly = down[:, oy : oy + r] @ up
    lx = down[:, ox : ox + r] @ up
    # canvas pixels outside the placed image hold pad_value; rows of `down` sum to 1
    u = down[:, oy : oy + r].sum(axis=1)
    v = down[:, ox : ox + r].sum(axis=1)
    const = params.pad_value * (1.0 - np.outer(u, v))
    return _separable(img, ly, lx, const)


def rand_layer_apply(img, params: RandLayerParams, rng: Rng) -> np.ndarray:
    return rand_layer_draw(np.asarray(img, dtype=np.float64), params, rng)[0]


def random_crop_draw(img: np.ndarray, keep_ratio: float, rng: Rng):
    if not 0.5 <= keep_ratio <= 1.0:
        raise ValueError("keep_ratio must lie in [0.5, 1]")
    s = _square_side(img)
    c = int(math.floor(keep_ratio * s + 1e-9))
    oy = int(rng.integers(0, s - c + 1))
    ox = int(rng.integers(0, s - c + 1))
    up = bilinear_matrix(s, c)
    ly = np.zeros((s, s))
    lx = np.zeros((s, s))
    ly[:, oy : oy + c] = up
    lx[:, ox : ox + c] = up
    return _separable(img, ly, lx)


def random_crop(img, keep_ratio: float, rng: Rng) -> np.ndarray:
    return random_crop_draw(np.asarray(img, dtype=np.float64), keep_ratio, rng)[0]


# --------------------------------------------------------------------------- DCT quantisation

JPEG_LUMINANCE = np.array(
    [
        [16, 11, 10, 16, 24, 40, 51, 61],
        [12, 12, 14, 19, 26, 58, 60, 55],
        [14, 13, 16, 24, 40, 57, 69, 56],
        [14, 17, 22, 29, 51, 87, 80, 62],
        [18, 22, 37, 56, 68, 109, 103, 77],
        [24, 35, 55, 64, 81, 104, 113, 92],
        [49, 64, 78, 87, 103, 121, 120, 101],
        [72, 92, 95, 98, 112, 100, 103, 99],
    ],
    dtype=np.float64,
)


@dataclass(frozen=True)
class QuantTable:
    values: np.ndarray

    def __post_init__(self):
        vals = np.array(self.values, dtype=np.float64)
        if vals.shape != (8, 8):
            raise ValueError(f"quantisation table must be 8x8, got {vals.shape}")
        if np.any(vals < 1):
            raise ValueError("quantisation steps must all be >= 1")
        vals.flags.writeable = False
        object.__setattr__(self, "values", vals)

    @classmethod
    def jpeg(cls, quality: int = 50) -> "QuantTable":
        """Standard luminance table with IJG quality scaling."""
        if not 1 <= quality <= 100:
            raise ValueError("quality must lie in [1, 100]")
        scale = 5000 / quality if quality < 50 else 200 - 2 * quality
        return cls(np.clip(np.floor((JPEG_LUMINANCE * scale + 50) / 100), 1, None))

    @classmethod
    def two_level(cls, q_low: float = 8.0, q_high: float = 60.0, threshold: int = 4) -> "QuantTable":
        """Fine steps where ``u + v < threshold``, coarse steps elsewhere."""
        u, v = np.mgrid[0:8, 0:8]
        return cls(np.where(u + v < threshold, q_low, q_high))

    @classmethod
    def ones(cls) -> "QuantTable":
        return cls(np.ones((8, 8)))


def dct_matrix(n: int = 8) -> np.ndarray:
    """Orthonormal type-II DCT: ``coeffs = C @ block @ C.T``."""
    k = np.arange(n)[:, None]
    i = np.arange(n)[None, :]
    mat = np.sqrt(2.0 / n) * np.cos(np.pi * (2 * i + 1) * k / (2 * n))
    mat[0] /= np.sqrt(2.0)
    return mat


_DCT8 = dct_matrix(8)


def fd_apply(img, table: QuantTable) -> np.ndarray:
    """Blockwise 8x8 DCT quantisation of every channel (no colour transform)."""
    img = np.asarray(img, dtype=np.float64)
    h, w, c = img.shape
    ph, pw = -h % 8, -w % 8
    x = np.pad(img * 255.0 - 128.0, ((0, ph), (0, pw), (0, 0)), mode="edge")
    by, bx = x.shape[0] // 8, x.shape[1] // 8
    blocks = x.reshape(by, 8, bx, 8, c)
    coef = np.einsum("ui,aibjc,vj->aubvc", _DCT8, blocks, _DCT8)
    q = table.values[None, :, None, :, None]
    coef = np.round(coef / q) * q
    back = np.einsum("ui,aubvc,vj->aibjc", _DCT8, coef, _DCT8).reshape(x.shape)
    return np.clip((back[:h, :w] + 128.0) / 255.0, 0.0, 1.0)


def bit_depth_reduce(img, bits: int) -> np.ndarray:
    if not 1 <= int(bits) <= 7:
        raise ValueError("bits must lie in [1, 7]")
    levels = 2 ** int(bits) - 1
    return np.floor(np.asarray(img, dtype=np.float64) * levels + 0.5) / levels


# --------------------------------------------------------------------------- constructors


# The two-level table at (8, 60, 4) leaves low frequencies nearly untouched;
# on the 32x32 reference model that let a quarter of I-FGSM examples survive
# FD+RDG, so the default is the coarser quality-10 luminance table.
DEFAULT_FD_QUALITY = 10


def fd(table: Optional[QuantTable] = None, name: str = "fd") -> Preprocessor:
    table = table if table is not None else QuantTable.jpeg(DEFAULT_FD_QUALITY)
    return Preprocessor(name, lambda img, rng: (fd_apply(img, table), None), False, False)


def rdg(params: Optional[RdgParams] = None, name: str = "rdg") -> Preprocessor:
    params = params if params is not None else RdgParams()
    randomized = params.distortion_limit > 0 or params.corner_policy == "random-corner"
    return Preprocessor(name, lambda img, rng: rdg_draw(img, params, rng), True, randomized)


def rand_layer(params: Optional[RandLayerParams] = None, name: str = "rand") -> Preprocessor:
    params = params if params is not None else RandLayerParams()
    return Preprocessor(name, lambda img, rng: rand_layer_draw(img, params, rng), True, True)


def bitdepth(bits: int = 3) -> Preprocessor:
    if not 1 <= int(bits) <= 7:
        raise ValueError("bits must lie in [1, 7]")
    return Preprocessor(f"bitdepth({bits})", lambda img, rng: (bit_depth_reduce(img, bits), None), False, False)


def crop(keep_ratio: float = 0.75) -> Preprocessor:
    if not 0.5 <= keep_ratio <= 1.0:
        raise ValueError("keep_ratio must lie in [0.5, 1]")
    return Preprocessor(f"crop({keep_ratio:g})", lambda img, rng: random_crop_draw(img, keep_ratio, rng),
                        True, keep_ratio < 1.0)


def compose(stages) -> Preprocessor:
    """Apply ``stages`` left to right.  Nested compositions are flattened."""
    stages = tuple(stages)
    if not stages:
        raise ValueError("compose needs at least one stage")
    leaves = tuple(leaf for stage in stages for leaf in stage.stages)

    def draw(img, rng):
        steps = []
        for stage in leaves:
            out, vjp = stage.draw(img, rng)
            steps.append((img, vjp))
            img = out
        return img, _ChainVjp(steps)

    if len(leaves) == 1:
        return leaves[0]
    return Preprocessor(
        _join_names(leaves),
        draw,
        all(s.differentiable for s in leaves),
        any(s.randomized for s in leaves),
        leaves,
    )


class _ChainVjp:
    """Backward pass through a composition; ``surrogate`` stands in for stages
    without a Jacobian.  Calling without a surrogate treats them as identity."""

    def __init__(self, steps):
        self.steps = steps  # [(stage input, vjp or None)]

    def __call__(self, g, surrogate=None):
        for stage_input, vjp in reversed(self.steps):
            if vjp is not None:
                g = vjp(g)
            elif surrogate is not None:
                g = surrogate(stage_input, g)
        return g


def _join_names(leaves) -> str:
    parts, i = [], 0
    while i < len(leaves):
        j = i
        while j + 1 < len(leaves) and leaves[j + 1].name == leaves[i].name:
            j += 1
        run = j - i + 1
        parts.append(leaves[i].name if run == 1 else f"{leaves[i].name}x{run}")
        i = j + 1
    return "+".join(parts)


# --------------------------------------------------------------------------- pipeline strings


class PipelineError(ValueError):
    pass


_TOKEN = re.compile(r"^(?P<name>[a-z]+)(?:x(?P<rep>\d+))?(?:\((?P<args>[^()]*)\))?$")


def _split_top(spec: str, sep: str = "+"):
    parts, depth, cur = [], 0, []
    for ch in spec:
        if ch == "(":
            depth += 1
        elif ch == ")":
            depth -= 1
        if ch == sep and depth == 0:
            parts.append("".join(cur))
            cur = []
        else:
            cur.append(ch)
    parts.append("".join(cur))
    return [p.strip() for p in parts]


def parse_args(token: str, raw: Optional[str]):
    """``a=1,b=x`` -> ({'a': '1', 'b': 'x'}, []); bare values go to the positional list."""
    kw, pos = {}, []
    if raw is None or not raw.strip():
        return kw, pos
    for item in raw.split(","):
        item = item.strip()
        if not item:
            raise PipelineError(f"empty argument in {token!r}")
        if "=" in item:
            key, val = (s.strip() for s in item.split("=", 1))
            if not key or not val:
                raise PipelineError(f"malformed argument {item!r} in {token!r}")
            kw[key] = val
        else:
            pos.append(item)
    return kw, pos


def _num(token, key, val, cast=float):
    try:
        return cast(val)
    except ValueError:
        raise PipelineError(f"bad value {val!r} for {key!r} in {token!r}") from None


def _build_stage(token: str, name: str, kw: dict, pos: list) -> Preprocessor:
    def take(key, default, cast=float, aliases=()):
        for k in (key, *aliases):
            if k in kw:
                return _num(token, k, kw.pop(k), cast)
        return default

    if name == "identity":
        stage = identity
    elif name == "fd":
        if "q" in kw or pos:
            quality = _num(token, "q", kw.pop("q")) if "q" in kw else _num(token, "q", pos.pop(0))
            stage = fd(QuantTable.jpeg(int(quality)))
        elif any(k in kw for k in ("low", "high", "t", "threshold")):
            low = take("low", 8.0)
            high = take("high", 60.0)
            t = take("t", 4, int, ("threshold",))
            stage = fd(QuantTable.two_level(low, high, t))
        else:
            stage = fd()
    elif name == "rdg":
        delta = take("delta", 0.15)
        d = take("d", None, int)
        corner = kw.pop("corner", "random")
        policy = {"random": "random-corner", "fixed": "fixed-upper-left",
                  "random-corner": "random-corner", "fixed-upper-left": "fixed-upper-left"}.get(corner)
        if policy is None:
            raise PipelineError(f"bad corner {corner!r} in {token!r}")
        stage = rdg(RdgParams(delta, d, policy))
    elif name == "rand":
        stage = rand_layer(RandLayerParams(take("max", 1.104), take("pad", 1.338), take("value", 0.5)))
    elif name == "bitdepth":
        bits = _num(token, "bits", pos.pop(0), int) if pos else take("bits", 3, int)
        stage = bitdepth(bits)
    elif name == "crop":
        keep = _num(token, "keep", pos.pop(0)) if pos else take("keep", 0.75)
        stage = crop(keep)
    else:
        raise PipelineError(f"unknown transform {token!r}")
    if kw or pos:
        extra = ", ".join(list(kw) + pos)
        raise PipelineError(f"unexpected argument(s) {extra} in {token!r}")
    return stage


def parse_pipeline(spec: str) -> Preprocessor:
    """Build a :class:`Preprocessor` from a pipeline string such as ``fdx3+rdg(delta=0.15)``."""
    if not spec or not spec.strip():
        raise PipelineError("empty pipeline spec")
    stages = []
    for token in _split_top(spec.strip()):
        m = _TOKEN.match(token)
        if not m:
            raise PipelineError(f"cannot parse token {token!r}")
        kw, pos = parse_args(token, m.group("args"))
        try:
            stage = _build_stage(token, m.group("name"), kw, pos)
        except PipelineError:
            raise
        except ValueError as exc:
            raise PipelineError(f"{token!r}: {exc}") from None
        rep = int(m.group("rep") or 1)
        if rep < 1:
            raise PipelineError(f"repeat count must be >= 1 in {token!r}")
        stages.extend([stage] * rep)
    return compose(stages)
