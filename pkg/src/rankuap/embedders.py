"""Small fixed-architecture embedding networks with exact input gradients.

All networks share the same preprocessing (pixels mapped from ``[0, 255]`` to
``[-1, 1]``) and return an l2-normalised embedding.  Four architectures are
available: ``linear``, ``mlp``, ``conv`` (two convolutions, global average pool,
linear) and ``pool-mlp`` (4x4 patch average pool followed by an MLP).
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .data import ImageSet, atomic_write_bytes

ARCHITECTURES = ("linear", "mlp", "conv", "pool-mlp")
_ARCH_CODES = {name: i for i, name in enumerate(ARCHITECTURES)}

MODEL_MAGIC = b"MEMB"
MODEL_VERSION = 1
_NORM_FLOOR = 1e-12


class DegenerateEmbeddingError(ValueError):
    pass


class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch):
        super().__init__(f"training diverged (non-finite loss) at epoch {epoch}")
        self.epoch = epoch


class ModelFormatError(ValueError):
    pass


# -- layers ----------------------------------------------------------------------
# Each layer maps (x, params) -> (out, cache) and (grad_out, cache, params) ->
# (grad_in, param_grads).  Parameterless layers take and return empty tuples.

class _Scale:
    n_params = 0

    def forward(self, x, params):
        return x / 127.5 - 1.0, None

    def backward(self, g, cache, params):
        return g / 127.5, ()


class _Flatten:
    n_params = 0

    def forward(self, x, params):
        return x.reshape(len(x), -1), x.shape

    def backward(self, g, shape, params):
        return g.reshape(shape), ()


class _ReLU:
    n_params = 0

    def forward(self, x, params):
        mask = x > 0
        return x * mask, mask

    def backward(self, g, mask, params):
        return g * mask, ()


class _Dense:
    n_params = 2

    def forward(self, x, params):
        w, b = params
        return x @ w.T + b, x

    def backward(self, g, x, params):
        w, _ = params
        return g @ w, (g.T @ x, g.sum(axis=0))


class _Conv2d:
    n_params = 2

    def __init__(self, stride=1, pad=1):
        self.stride = stride
        self.pad = pad

    def forward(self, x, params):
        w, b = params
        k = w.shape[-1]
        s, p = self.stride, self.pad
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
        win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
        win = win[:, :, ::s, ::s]  # (N, C, Ho, Wo, k, k)
        n, c, ho, wo = win.shape[:4]
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n, ho, wo, c * k * k)
        out = cols @ w.reshape(len(w), -1).T + b
        return out.transpose(0, 3, 1, 2), (cols, xp.shape)

    def backward(self, g, cache, params):
        w, _ = params
        cols, padded_shape = cache
        k = w.shape[-1]
        s, p = self.stride, self.pad
        n, c = padded_shape[:2]
        gt = g.transpose(0, 2, 3, 1)  # (N, Ho, Wo, out)
        ho, wo = gt.shape[1:3]
        gw = (gt.reshape(-1, gt.shape[-1]).T @ cols.reshape(-1, cols.shape[-1])).reshape(w.shape)
        gb = gt.sum(axis=(0, 1, 2))
        gcols = (gt @ w.reshape(len(w), -1)).reshape(n, ho, wo, c, k, k)
        gxp = np.zeros(padded_shape, dtype=g.dtype)
        for i in range(k):
            for j in range(k):
                gxp[:, :, i:i + s * ho:s, j:j + s * wo:s] += gcols[..., i, j].transpose(0, 3, 1, 2)
        return gxp[:, :, p:padded_shape[2] - p, p:padded_shape[3] - p], (gw, gb)


class _GlobalAvgPool:
    n_params = 0

    def forward(self, x, params):
        return x.mean(axis=(2, 3)), x.shape

    def backward(self, g, shape, params):
        area = shape[2] * shape[3]
        return np.broadcast_to((g / area)[:, :, None, None], shape).copy(), ()


class _AvgPool:
    n_params = 0

    def __init__(self, size):
        self.size = size

    def forward(self, x, params):
        n, c, h, w = x.shape
        k = self.size
        return x.reshape(n, c, h // k, k, w // k, k).mean(axis=(3, 5)), x.shape

    def backward(self, g, shape, params):
        k = self.size
        up = np.repeat(np.repeat(g, k, axis=2), k, axis=3) / (k * k)
        return up, ()


def _build(arch, input_shape, embed_dim, hidden):
    """Return (layers, param_shapes) for an architecture."""
    c, h, w = input_shape
    m = c * h * w
    if arch == "linear":
        layers = [_Scale(), _Flatten(), _Dense()]
        shapes = [(embed_dim, m), (embed_dim,)]
    elif arch == "mlp":
        layers = [_Scale(), _Flatten(), _Dense(), _ReLU(), _Dense()]
        shapes = [(hidden, m), (hidden,), (embed_dim, hidden), (embed_dim,)]
    elif arch == "conv":
        c1, c2 = 16, 32
        layers = [_Scale(), _Conv2d(1, 1), _ReLU(), _Conv2d(2, 1), _ReLU(), _GlobalAvgPool(), _Dense()]
        shapes = [(c1, c, 3, 3), (c1,), (c2, c1, 3, 3), (c2,), (embed_dim, c2), (embed_dim,)]
    elif arch == "pool-mlp":
        if h % 4 or w % 4:
            raise ValueError("pool-mlp needs image sides divisible by 4")
        pooled = c * (h // 4) * (w // 4)
        layers = [_Scale(), _AvgPool(4), _Flatten(), _Dense(), _ReLU(), _Dense()]
        shapes = [(hidden, pooled), (hidden,), (embed_dim, hidden), (embed_dim,)]
    else:
        raise ValueError(f"unknown architecture {arch!r}; choose from {ARCHITECTURES}")
    return layers, shapes


@dataclass(frozen=True)
class ClassifierHead:
    """Linear identity classifier on the pre-normalisation feature (``embed_dim x n_classes``)."""

    weight: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weight, dtype=np.float32)
        if w.ndim != 2 or w.shape[1] < 2:
            raise ValueError("classifier head must be (embed_dim, n_classes) with >= 2 classes")
        object.__setattr__(self, "weight", w)

    @property
    def n_classes(self):
        return self.weight.shape[1]


class Embedder:
    """A frozen embedding network ``f(x) = y / ||y||``.

    ``x`` may be one image ``(C, H, W)`` or a batch ``(N, C, H, W)``.  Computation
    runs in float64 when ``x`` is float64 (used by gradient checks), otherwise in
    float32.
    """

    def __init__(self, arch, params, input_shape):
        self.arch = arch
        self.input_shape = tuple(int(s) for s in input_shape)
        params = [np.array(p, dtype=np.float32) for p in params]
        embed_dim = params[-1].shape[0]
        hidden = params[0].shape[0]
        self.layers, shapes = _build(arch, self.input_shape, embed_dim, hidden)
        if [p.shape for p in params] != [tuple(s) for s in shapes]:
            raise ValueError(f"parameter shapes do not match architecture {arch!r}")
        for p in params:
            p.setflags(write=False)
        self.params = tuple(params)
        self._cast = {}

    @property
    def embed_dim(self):
        return self.params[-1].shape[0]

    def _params_as(self, dtype):
        if dtype == np.float32:
            return self.params
        if dtype not in self._cast:
            self._cast[dtype] = tuple(p.astype(dtype) for p in self.params)
        return self._cast[dtype]

    def _prepare(self, x):
        x = np.asarray(x)
        single = x.ndim == 3
        if single:
            x = x[None]
        if x.shape[1:] != self.input_shape:
            raise ValueError(f"input shape {x.shape[1:]} does not match model {self.input_shape}")
        dtype = np.float64 if x.dtype == np.float64 else np.float32
        return x.astype(dtype, copy=False), single

    def _run(self, x, params=None):
        if params is None:
            params = self._params_as(x.dtype)
        caches, i = [], 0
        for layer in self.layers:
            p = params[i:i + layer.n_params]
            x, cache = layer.forward(x, p)
            caches.append(cache)
            i += layer.n_params
        return x, caches

    def _back(self, g, caches, want_params=False, params=None):
        if params is None:
            params = self._params_as(g.dtype)
        grads = []
        i = len(params)
        for layer, cache in zip(reversed(self.layers), reversed(caches)):
            p = params[i - layer.n_params:i]
            g, pg = layer.backward(g, cache, p)
            grads[:0] = list(pg)
            i -= layer.n_params
        return (g, grads) if want_params else g

    def raw(self, x):
        """Pre-normalisation feature ``y``."""
        xb, single = self._prepare(x)
        y, _ = self._run(xb)
        return y[0] if single else y

    def _normalise(self, y):
        norms = np.linalg.norm(y, axis=1, keepdims=True)
        if np.any(norms < _NORM_FLOOR):
            raise DegenerateEmbeddingError("raw feature has (near) zero norm")
        return y / norms, norms

    def forward(self, x):
        xb, single = self._prepare(x)
        y, _ = self._run(xb)
        out, _ = self._normalise(y)
        return out[0] if single else out

    __call__ = forward

    def backward_input(self, x, grad_out):
        """Gradient of ``grad_out . f(x)`` with respect to ``x``."""
        xb, single = self._prepare(x)
        g = np.asarray(grad_out, dtype=xb.dtype)
        if g.shape[-1] != self.embed_dim:
            raise ValueError(f"grad_out has length {g.shape[-1]}, expected {self.embed_dim}")
        g = g.reshape(len(xb), self.embed_dim)
        y, caches = self._run(xb)
        yhat, norms = self._normalise(y)
        gy = (g - yhat * np.sum(yhat * g, axis=1, keepdims=True)) / norms
        gx = self._back(gy, caches)
        return gx[0] if single else gx

    def backward_raw(self, x, grad_y):
        """Gradient of ``grad_y . y(x)`` with respect to ``x`` (no normalisation)."""
        xb, single = self._prepare(x)
        g = np.asarray(grad_y, dtype=xb.dtype).reshape(len(xb), self.embed_dim)
        _, caches = self._run(xb)
        gx = self._back(g, caches)
        return gx[0] if single else gx


def forward(model: Embedder, x):
    return model.forward(x)


def backward_input(model: Embedder, x, grad_out):
    return model.backward_input(x, grad_out)


def classify(model: Embedder, head: ClassifierHead, x):
    """Identity logits ``head^T . y(x)`` from the raw feature."""
    if head.weight.shape[0] != model.embed_dim:
        raise ValueError("classifier head does not match embedding dimension")
    y = model.raw(x)
    return y @ head.weight.astype(y.dtype, copy=False)


def init_embedder(arch, input_shape, embed_dim=32, hidden=128, seed=0) -> Embedder:
    """Randomly initialised model (He-normal weights, zero biases)."""
    _, shapes = _build(arch, tuple(input_shape), embed_dim, hidden)
    rng = np.random.default_rng(seed)
    params = []
    for shape in shapes:
        if len(shape) == 1:
            params.append(np.zeros(shape, np.float32))
        else:
            fan_in = int(np.prod(shape[1:]))
            params.append((rng.normal(size=shape) * np.sqrt(2.0 / fan_in)).astype(np.float32))
    return Embedder(arch, params, input_shape)


# -- training ----------------------------------------------------------------------

@dataclass
class TrainConfig:
    seed: int = 0
    epochs: int = 20
    batch_size: int = 32
    lr: float = 3e-3
    weight_decay: float = 1e-2
    embed_dim: int = 32
    hidden: int = 128

    @classmethod
    def for_arch(cls, arch, **overrides) -> "TrainConfig":
        """Defaults tuned per architecture on the default synthetic benchmark."""
        if arch not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {arch!r}")
        return cls(**{**_ARCH_TRAIN_DEFAULTS.get(arch, {}), **overrides})


# the conv net trains slowly and does not tolerate strong weight decay
_ARCH_TRAIN_DEFAULTS = {"conv": dict(epochs=40, lr=1e-2, weight_decay=1e-4)}


@dataclass
class _Adam:
    lr: float
    b1: float = 0.9
    b2: float = 0.999
    eps: float = 1e-8
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    t: int = 0

    def step(self, params, grads):
        if not self.m:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def train_embedder(arch, train: ImageSet, cfg: TrainConfig | None = None):
    """Fit an embedder and identity head with softmax cross-entropy (Adam, mini-batches).

    Returns ``(Embedder, ClassifierHead)``.  Fully determined by ``cfg.seed``.
    """
    cfg = cfg or TrainConfig.for_arch(arch)
    classes, labels = np.unique(train.identities, return_inverse=True)
    if len(classes) < 2:
        raise ValueError("need at least 2 train identities")
    images = np.asarray(train.images, dtype=np.float32)
    model = init_embedder(arch, images.shape[1:], cfg.embed_dim, cfg.hidden, cfg.seed)
    rng = np.random.default_rng(cfg.seed + 1)
    params = [p.copy() for p in model.params]
    head = (rng.normal(size=(cfg.embed_dim, len(classes))) * np.sqrt(1.0 / cfg.embed_dim)).astype(np.float32)
    weights = params + [head]
    opt = _Adam(cfg.lr)
    n = len(images)

    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            y, caches = model._run(images[idx], weights[:-1])
            logits = y @ weights[-1]
            logits -= logits.max(axis=1, keepdims=True)
            prob = np.exp(logits)
            prob /= prob.sum(axis=1, keepdims=True)
            lab = labels[idx]
            loss = -np.log(prob[np.arange(len(idx)), lab] + 1e-30).mean()
            if not np.isfinite(loss):
                raise TrainingDivergedError(epoch)
            total += loss * len(idx)
            glogits = prob
            glogits[np.arange(len(idx)), lab] -= 1.0
            glogits /= len(idx)
            ghead = y.T @ glogits
            gy = glogits @ weights[-1].T
            _, pgrads = model._back(gy.astype(np.float32), caches, True, weights[:-1])
            grads = [g + cfg.weight_decay * w for g, w in zip(pgrads + [ghead], weights)]
            opt.step(weights, grads)
        if not np.isfinite(total):
            raise TrainingDivergedError(epoch)

    return Embedder(arch, weights[:-1], model.input_shape), ClassifierHead(weights[-1])


def train_accuracy(model: Embedder, head: ClassifierHead, train: ImageSet) -> float:
    classes, labels = np.unique(train.identities, return_inverse=True)
    pred = classify(model, head, train.images).argmax(axis=1)
    return float(np.mean(pred == labels))


# -- model files --------------------------------------------------------------------
# "MEMB", u32 version, u8 arch code, u32 embed_dim, u32 C, H, W,
# u32 array count, per array (u8 ndim, u32 dims...), u8 has_head,
# then all arrays (parameters, then head weight if present) as little-endian f32.

def save_model(model: Embedder, path, head: ClassifierHead | None = None) -> None:
    arrays = list(model.params) + ([head.weight] if head is not None else [])
    out = [struct.pack("<4sIBI", MODEL_MAGIC, MODEL_VERSION, _ARCH_CODES[model.arch], model.embed_dim)]
    out.append(struct.pack("<III", *model.input_shape))
    out.append(struct.pack("<I", len(arrays)))
    for a in arrays:
        out.append(struct.pack("<B", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape))
    out.append(struct.pack("<B", 1 if head is not None else 0))
    for a in arrays:
        out.append(np.ascontiguousarray(a, dtype="<f4").tobytes())
    atomic_write_bytes(path, b"".join(out))


def load_model(path):
    """Return ``(Embedder, ClassifierHead or None)``."""
    with open(path, "rb") as fh:
        blob = fh.read()
    try:
        magic, version, code, embed_dim = struct.unpack_from("<4sIBI", blob, 0)
    except struct.error as exc:
        raise ModelFormatError(f"{path}: truncated header") from exc
    if magic != MODEL_MAGIC:
        raise ModelFormatError(f"{path}: bad magic {magic!r}")
    if version != MODEL_VERSION:
        raise ModelFormatError(f"{path}: version {version}, expected {MODEL_VERSION}")
    if code >= len(ARCHITECTURES):
        raise ModelFormatError(f"{path}: unknown architecture code {code}")
    try:
        pos = struct.calcsize("<4sIBI")
        input_shape = struct.unpack_from("<III", blob, pos)
        pos += 12
        (count,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        shapes = []
        for _ in range(count):
            (ndim,) = struct.unpack_from("<B", blob, pos)
            pos += 1
            shapes.append(struct.unpack_from(f"<{ndim}I", blob, pos))
            pos += 4 * ndim
        (has_head,) = struct.unpack_from("<B", blob, pos)
        pos += 1
    except struct.error as exc:
        raise ModelFormatError(f"{path}: truncated shape table") from exc
    arrays = []
    for shape in shapes:
        n = int(np.prod(shape))
        if pos + 4 * n > len(blob):
            raise ModelFormatError(f"{path}: truncated parameters")
        arrays.append(np.frombuffer(blob, dtype="<f4", count=n, offset=pos).reshape(shape).astype(np.float32))
        pos += 4 * n
    head = ClassifierHead(arrays.pop()) if has_head else None
    model = Embedder(ARCHITECTURES[code], arrays, input_shape)
    if model.embed_dim != embed_dim:
        raise ModelFormatError(f"{path}: embed_dim mismatch")
    return model, head
