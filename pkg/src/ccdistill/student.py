"""Three-layer convolutional depth student with hand-written backprop.

Architecture: conv3x3(C_in -> 16) . ReLU -> conv3x3(16 -> 16) . ReLU -> conv3x3(16 -> 1),
reflect padding throughout, so the output has the input's spatial size.
Parameters live in one flat float64 vector; the layer weights are views into it.

Convolutions run as im2col + one BLAS matmul over the whole batch; the
gather/scatter kernels come from :mod:`ccdistill._kernels`.
"""

import struct
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .errors import FormatError, GraphMismatch, ShapeMismatch
from .grid import DepthGrid

HIDDEN = 16
FEATURE_DIM = 4
FEATURE_SEED = 20240611


def param_count(c_in, hidden=HIDDEN):
    return 9 * c_in * hidden + hidden + 9 * hidden * hidden + hidden + 9 * hidden + 1


class MicroStudent:
    """Parameters are always float64; ``dtype`` sets the precision of the conv arithmetic."""

    def __init__(self, c_in=3, params=None, hidden=HIDDEN, dtype=np.float64):
        self.c_in = c_in
        self.hidden = hidden
        self.dtype = np.dtype(dtype)
        if self.dtype not in (np.float32, np.float64):
            raise ValueError(f"unsupported compute dtype {self.dtype}")
        n = param_count(c_in, hidden)
        if params is None:
            params = np.zeros(n)
        params = np.array(params, dtype=np.float64)
        if params.shape != (n,):
            raise ShapeMismatch(f"expected {n} parameters, got {params.shape}")
        self.params = params
        # fixed projection of the penultimate activations used for feature alignment
        self.feature_proj = np.random.default_rng(FEATURE_SEED).standard_normal((hidden, FEATURE_DIM)) / np.sqrt(hidden)

    @classmethod
    def he_uniform(cls, c_in, rng, hidden=HIDDEN, dtype=np.float64):
        m = cls(c_in, hidden=hidden, dtype=dtype)
        for w, _ in m.layers():
            limit = np.sqrt(6.0 / w.shape[0])
            w[...] = rng.uniform(-limit, limit, size=w.shape)
        return m

    def layers(self):
        """``[(W, b), ...]`` as views into :attr:`params`; ``W`` is ``(9 * c_in, c_out)``."""
        shapes = [(self.c_in, self.hidden), (self.hidden, self.hidden), (self.hidden, 1)]
        out, off = [], 0
        for cin, cout in shapes:
            nw = 9 * cin * cout
            w = self.params[off:off + nw].reshape(9 * cin, cout)
            off += nw
            b = self.params[off:off + cout]
            off += cout
            out.append((w, b))
        return out

    @property
    def n_params(self):
        return self.params.size

    def copy(self):
        return MicroStudent(self.c_in, self.params.copy(), self.hidden, self.dtype)

    # -- forward / backward ----------------------------------------------------

    def forward(self, x):
        """Batched forward.  ``x`` is ``(B, H, W, C_in)``.

        Returns ``(depth (B, H, W), features (B, H, W, 4), cache)``.
        """
        dt = self.dtype
        x = np.asarray(x, dtype=dt)
        if x.ndim != 4 or x.shape[3] != self.c_in:
            raise ShapeMismatch(f"expected (B, H, W, {self.c_in}) input, got {x.shape}")
        b, h, w, _ = x.shape
        if h < 2 or w < 2:
            raise ShapeMismatch("reflect padding needs at least 2x2 inputs")
        (w1, b1), (w2, b2), (w3, b3) = [(w.astype(dt), bb.astype(dt)) for w, bb in self.layers()]
        proj = self.feature_proj.astype(dt)
        cols1 = _kernels.im2col_reflect(x)
        z1 = cols1 @ w1 + b1
        h1 = np.maximum(z1, 0.0)
        cols2 = _kernels.im2col_reflect(h1.reshape(b, h, w, self.hidden))
        z2 = cols2 @ w2 + b2
        h2 = np.maximum(z2, 0.0)
        cols3 = _kernels.im2col_reflect(h2.reshape(b, h, w, self.hidden))
        out = (cols3 @ w3 + b3).reshape(b, h, w).astype(np.float64)
        feats = (h2 @ proj).reshape(b, h, w, FEATURE_DIM).astype(np.float64)
        cache = {"shape": (b, h, w), "cols1": cols1, "z1": z1, "cols2": cols2, "z2": z2, "cols3": cols3}
        return out, feats, cache

    def backward(self, cache, grad_out, grad_feats=None):
        """Gradient of a scalar loss w.r.t. :attr:`params`.

        ``grad_out`` is d loss / d depth ``(B, H, W)``; ``grad_feats`` (optional)
        is d loss / d features ``(B, H, W, 4)``.
        """
        b, h, w = cache["shape"]
        grad_out = np.asarray(grad_out, dtype=np.float64)
        if grad_out.shape != (b, h, w):
            raise GraphMismatch(f"output gradient {grad_out.shape} does not match forward pass {(b, h, w)}")
        if grad_feats is not None and np.shape(grad_feats) != (b, h, w, FEATURE_DIM):
            raise GraphMismatch(f"feature gradient {np.shape(grad_feats)} does not match forward pass")
        dt = self.dtype
        _, (w2, _), (w3, _) = [(w.astype(dt), bb) for w, bb in self.layers()]
        hid = self.hidden
        grads = []
        g3 = grad_out.reshape(-1, 1).astype(dt)
        grads.append((cache["cols3"].T @ g3, g3.sum(axis=0)))
        dh2 = _kernels.col2im_outer_reflect(g3, w3[:, 0], b, h, w, hid).reshape(-1, hid)
        if grad_feats is not None:
            dh2 = dh2 + np.asarray(grad_feats, dtype=dt).reshape(-1, FEATURE_DIM) @ self.feature_proj.T.astype(dt)
        dz2 = dh2 * (cache["z2"] > 0)
        grads.append((cache["cols2"].T @ dz2, dz2.sum(axis=0)))
        dh1 = _kernels.col2im_reflect(dz2 @ w2.T, b, h, w, hid).reshape(-1, hid)
        dz1 = dh1 * (cache["z1"] > 0)
        grads.append((cache["cols1"].T @ dz1, dz1.sum(axis=0)))
        grads.reverse()
        return np.concatenate([np.concatenate([gw.ravel(), gb.ravel()]) for gw, gb in grads]).astype(np.float64)

    def predict(self, image):
        """Depth map for a single :class:`ImageGrid`."""
        out, _, _ = self.forward(image.values[None])
        return DepthGrid(out[0])


def forward(model, image):
    """Single-image forward pass: ``(DepthGrid, activations)``."""
    if image.channels != model.c_in:
        raise ShapeMismatch(f"image has {image.channels} channels, model expects {model.c_in}")
    out, feats, cache = model.forward(image.values[None])
    cache["features"] = feats
    return DepthGrid(out[0]), cache


def backward(model, cache, grad_out, grad_feats=None):
    """Gradient vector for a single-image pass produced by :func:`forward`."""
    grad_out = np.asarray(grad_out, dtype=np.float64)
    if grad_out.ndim == 2:
        grad_out = grad_out[None]
    if grad_feats is not None and np.ndim(grad_feats) == 3:
        grad_feats = np.asarray(grad_feats)[None]
    return model.backward(cache, grad_out, grad_feats)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


@dataclass
class OptimState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, n, **kw):
        return cls(np.zeros(n), np.zeros(n), **kw)


def adam_step(params, grad, state):
    """In-place Adam update of ``params``; returns ``state``."""
    state.step += 1
    state.m *= state.beta1
    state.m += (1 - state.beta1) * grad
    state.v *= state.beta2
    state.v += (1 - state.beta2) * grad * grad
    mhat = state.m / (1 - state.beta1**state.step)
    vhat = state.v / (1 - state.beta2**state.step)
    params -= state.lr * mhat / (np.sqrt(vhat) + state.eps)
    return state


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"CCDSTUDT"
CHECKPOINT_VERSION = 1
_HEADER = struct.Struct("<8sIIIQQdddd")


@dataclass
class Checkpoint:
    model: MicroStudent
    optim: OptimState
    config_hash: str = field(default="0" * 64)


def save_checkpoint(path, model, optim, config_hash_hex):
    """Layout (little endian): magic, version u32, c_in u32, hidden u32, n u64, step u64,
    lr/beta1/beta2/eps f64, params f64[n], m f64[n], v f64[n], sha256 digest (32 bytes)."""
    digest = bytes.fromhex(config_hash_hex)
    if len(digest) != 32:
        raise ValueError("config hash must be a sha256 hex digest")
    header = _HEADER.pack(
        CHECKPOINT_MAGIC, CHECKPOINT_VERSION, model.c_in, model.hidden, model.n_params,
        optim.step, optim.lr, optim.beta1, optim.beta2, optim.eps,
    )
    with open(path, "wb") as f:
        f.write(header)
        for arr in (model.params, optim.m, optim.v):
            f.write(np.asarray(arr, dtype="<f8").tobytes())
        f.write(digest)


def load_checkpoint(path):
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < _HEADER.size or raw[:8] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a student checkpoint")
    magic, version, c_in, hidden, n, step, lr, b1, b2, eps = _HEADER.unpack_from(raw)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    if n != param_count(c_in, hidden):
        raise FormatError(f"{path}: parameter count {n} inconsistent with architecture")
    need = _HEADER.size + 3 * 8 * n + 32
    if len(raw) != need:
        raise FormatError(f"{path}: expected {need} bytes, found {len(raw)}")
    off = _HEADER.size
    arrs = []
    for _ in range(3):
        arrs.append(np.frombuffer(raw, dtype="<f8", count=n, offset=off).astype(np.float64))
        off += 8 * n
    model = MicroStudent(c_in, arrs[0], hidden)
    optim = OptimState(arrs[1], arrs[2], step, lr, b1, b2, eps)
    return Checkpoint(model, optim, raw[off:off + 32].hex())
