"""Small dense-network toolkit: Fourier features, MLPs with manual backprop, Adam,
similarity scores and finite-difference gradient checks."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import kernels
from .errors import DegenerateVectorError, DimensionError, InvalidArgumentError, NumericError

# Rows are pushed through BLAS in fixed-size zero-padded blocks so every row is
# produced by the same GEMM kernel: a pose gives bit-identical latents whether
# it is encoded alone, in a batch, or at any position in the batch.
ROW_BLOCK = 128

ACTIVATIONS = ("relu", "identity", "sigmoid")


@dataclass(frozen=True)
class FourierConfig:
    num_frequencies: int = 11
    schedule: str = "linear"  # "linear": f_k = 2k, "geometric": f_k = 2**k

    def __post_init__(self):
        if self.num_frequencies < 1:
            raise InvalidArgumentError("num_frequencies must be positive")
        if self.schedule not in ("linear", "geometric"):
            raise InvalidArgumentError(f"unknown Fourier schedule {self.schedule!r}")

    def frequencies(self) -> np.ndarray:
        k = np.arange(self.num_frequencies, dtype=np.float64)
        return 2.0 * k if self.schedule == "linear" else 2.0**k

    def output_dim(self, n_inputs: int) -> int:
        return n_inputs * (1 + 2 * self.num_frequencies)


def fourier_encode(x, cfg: FourierConfig = FourierConfig()) -> np.ndarray:
    """Encode each scalar as ``(x, sin(f_k x), cos(f_k x))_k``; accepts one vector or a batch."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        if x.shape[0] < 1:
            raise InvalidArgumentError("fourier_encode needs at least one component")
        return kernels.fourier_features(x[None, :], cfg.frequencies())[0]
    return kernels.fourier_features(x, cfg.frequencies())


def _blocked_affine(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    n = x.shape[0]
    out = np.empty((n, w.shape[0]), dtype=w.dtype)
    wt = w.T
    for s in range(0, n, ROW_BLOCK):
        blk = x[s : s + ROW_BLOCK]
        m = blk.shape[0]
        if m < ROW_BLOCK:
            pad = np.zeros((ROW_BLOCK, x.shape[1]), dtype=w.dtype)
            pad[:m] = blk
            out[s : s + m] = (pad @ wt)[:m]
        else:
            out[s : s + m] = blk @ wt
    out += b
    return out


def _activate(z, kind):
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "sigmoid":
        return 0.5 * (1.0 + np.tanh(0.5 * z))
    return z


@dataclass
class DenseLayer:
    weights: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    activation: str = "relu"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise InvalidArgumentError(f"unknown activation {self.activation!r}")
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[0],):
            raise DimensionError(
                f"inconsistent layer shapes {self.weights.shape} / {self.bias.shape}"
            )

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]

    @classmethod
    def init(cls, in_dim, out_dim, activation, rng) -> "DenseLayer":
        # He-uniform ahead of ReLU, Xavier-uniform otherwise
        if activation == "relu":
            limit = np.sqrt(6.0 / in_dim)
        else:
            limit = np.sqrt(6.0 / (in_dim + out_dim))
        w = rng.uniform(-limit, limit, size=(out_dim, in_dim))
        return cls(w, np.zeros(out_dim), activation)

    @classmethod
    def zeros(cls, in_dim, out_dim, activation="identity") -> "DenseLayer":
        return cls(np.zeros((out_dim, in_dim)), np.zeros(out_dim), activation)

    def copy(self) -> "DenseLayer":
        return DenseLayer(self.weights.copy(), self.bias.copy(), self.activation)


@dataclass
class MlpCache:
    inputs: list  # input to each layer
    pre: list  # pre-activations of each layer
    outputs: np.ndarray


@dataclass
class Mlp:
    layers: list[DenseLayer] = field(default_factory=list)

    def __post_init__(self):
        for a, b in zip(self.layers[:-1], self.layers[1:]):
            if a.out_dim != b.in_dim:
                raise DimensionError(f"layer widths do not chain: {a.out_dim} -> {b.in_dim}")

    @classmethod
    def init(cls, sizes: Sequence[int], rng, hidden="relu", output="identity") -> "Mlp":
        """``sizes = [in, h1, ..., out]``; hidden layers use ``hidden``, the last ``output``."""
        if len(sizes) < 2:
            raise InvalidArgumentError("an MLP needs at least input and output sizes")
        n = len(sizes) - 1
        layers = [
            DenseLayer.init(sizes[i], sizes[i + 1], hidden if i < n - 1 else output, rng)
            for i in range(n)
        ]
        return cls(layers)

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    def copy(self) -> "Mlp":
        return Mlp([l.copy() for l in self.layers])

    def astype(self, dtype) -> "Mlp":
        return Mlp(
            [DenseLayer(l.weights.astype(dtype), l.bias.astype(dtype), l.activation) for l in self.layers]
        )

    def named_parameters(self, prefix: str = "") -> list[tuple[str, np.ndarray]]:
        out = []
        for i, l in enumerate(self.layers):
            out.append((f"{prefix}layers.{i}.weights", l.weights))
            out.append((f"{prefix}layers.{i}.bias", l.bias))
        return out

    def forward(self, x):
        return mlp_forward(self, x)

    def __call__(self, x) -> np.ndarray:
        return mlp_forward(self, x)[0]


def mlp_forward(net: Mlp, batch) -> tuple[np.ndarray, MlpCache]:
    """Affine + activation chain over a batch of row vectors."""
    dtype = net.layers[0].weights.dtype
    x = np.asarray(batch, dtype=dtype)
    if x.ndim != 2 or x.shape[1] != net.in_dim:
        raise DimensionError(f"expected batch with {net.in_dim} columns, got shape {x.shape}")
    inputs, pre = [], []
    for layer in net.layers:
        inputs.append(x)
        z = _blocked_affine(x, layer.weights, layer.bias)
        pre.append(z)
        x = _activate(z, layer.activation)
    return x, MlpCache(inputs, pre, x)


def mlp_backward(net: Mlp, cache: MlpCache, output_gradient):
    """Reverse-mode pass.  Returns ``(grads, input_gradient)`` where ``grads`` holds one
    ``(dW, db)`` pair per layer.  The ReLU derivative at exactly 0 is taken as 0."""
    g = np.asarray(output_gradient, dtype=np.float64)
    if g.shape != cache.outputs.shape:
        raise DimensionError(f"output gradient shape {g.shape} != outputs {cache.outputs.shape}")
    grads = [None] * len(net.layers)
    for i in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[i]
        z = cache.pre[i]
        if layer.activation == "relu":
            g = g * (z > 0)
        elif layer.activation == "sigmoid":
            s = _activate(z, "sigmoid")
            g = g * s * (1.0 - s)
        grads[i] = (g.T @ cache.inputs[i], g.sum(axis=0))
        g = g @ layer.weights
    return grads, g


def flatten_grads(grads) -> list[np.ndarray]:
    out = []
    for dw, db in grads:
        out.extend([dw, db])
    return out


# --------------------------------------------------------------------------
# Adam
# --------------------------------------------------------------------------


@dataclass
class AdamState:
    shapes: list
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def for_params(cls, params, lr=1e-4, **kw) -> "AdamState":
        shapes = [np.shape(p) for _, p in params]
        return cls(
            shapes, lr=lr, m=[np.zeros(s) for s in shapes], v=[np.zeros(s) for s in shapes], **kw
        )


def adam_step(params, grads, state: AdamState) -> AdamState:
    """Bias-corrected Adam update applied in place to ``params`` (``(name, array)`` pairs)."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise DimensionError("parameter, gradient and state counts differ")
    for (name, p), g, s in zip(params, grads, state.shapes):
        if np.shape(g) != np.shape(p) or tuple(np.shape(p)) != tuple(s):
            raise DimensionError(f"shape mismatch for {name}: {np.shape(g)} vs {np.shape(p)}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in {name}", where=name)
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for (name, p), g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return state


# --------------------------------------------------------------------------
# Similarity scores
# --------------------------------------------------------------------------

SCORE_FUNCTIONS = ("cosine", "l2", "learned")
NORM_FLOOR = 1e-12


def cosine_score(a, b) -> float:
    """ReLU-clamped cosine similarity."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na <= NORM_FLOOR or nb <= NORM_FLOOR:
        raise DegenerateVectorError("cosine score of a zero-norm vector")
    return max(0.0, float(a @ b) / (na * nb))


def l2_score(a, b) -> float:
    d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    return max(0.0, 1.0 - float(np.sqrt(d @ d)))


def learned_score(head: Mlp, a, b) -> float:
    """``sigmoid(MLP(a - b))``; ``head`` must end in a single sigmoid unit."""
    x = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    if head.out_dim != 1 or head.layers[-1].activation != "sigmoid":
        raise DimensionError("score head must map to one sigmoid output")
    return float(head(x[None, :])[0, 0])


@dataclass
class ScoreCache:
    kind: str
    a: np.ndarray
    b: np.ndarray
    raw: np.ndarray
    extra: object = None


def score_rows(kind: str, a: np.ndarray, b: np.ndarray, head: Mlp | None = None):
    """Score row ``i`` of ``a`` against row ``i`` of ``b``.

    Returns ``(scores, raw, cache)`` where ``raw`` is the similarity before the
    final clamp or squashing (cosine, ``1 - |a-b|`` or the head's logit).
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"score operands differ in shape: {a.shape} vs {b.shape}")
    if kind == "cosine":
        na = np.sqrt(np.sum(a * a, axis=1))
        nb = np.sqrt(np.sum(b * b, axis=1))
        if (na <= NORM_FLOOR).any() or (nb <= NORM_FLOOR).any():
            raise DegenerateVectorError("cosine score of a zero-norm latent")
        raw = np.sum(a * b, axis=1) / (na * nb)
        return np.maximum(raw, 0.0), raw, ScoreCache(kind, a, b, raw, (na, nb))
    if kind == "l2":
        diff = a - b
        r = np.sqrt(np.sum(diff * diff, axis=1))
        raw = 1.0 - r
        return np.maximum(raw, 0.0), raw, ScoreCache(kind, a, b, raw, (diff, r))
    if kind == "learned":
        if head is None:
            raise InvalidArgumentError("learned score needs a score head")
        if head.in_dim != a.shape[1]:
            raise DimensionError(f"score head expects {head.in_dim} inputs, got {a.shape[1]}")
        out, c = mlp_forward(head, a - b)
        raw = c.pre[-1][:, 0]
        return out[:, 0], raw, ScoreCache(kind, a, b, raw, c)
    raise InvalidArgumentError(f"unknown score function {kind!r}")


def score_rows_backward(cache: ScoreCache, ds: np.ndarray, head: Mlp | None = None):
    """Gradients ``(da, db, head_grads)`` of ``sum(ds * scores)``."""
    ds = np.asarray(ds, dtype=np.float64)
    if cache.kind == "cosine":
        na, nb = cache.extra
        g = (ds * (cache.raw > 0))[:, None]
        inv = 1.0 / (na * nb)
        c = cache.raw[:, None]
        da = g * (cache.b * inv[:, None] - c * cache.a / (na * na)[:, None])
        db = g * (cache.a * inv[:, None] - c * cache.b / (nb * nb)[:, None])
        return da, db, None
    if cache.kind == "l2":
        diff, r = cache.extra
        live = (cache.raw > 0) & (r > 0)
        coef = np.where(live, -ds / np.where(r > 0, r, 1.0), 0.0)
        da = coef[:, None] * diff
        return da, -da, None
    if cache.kind == "learned":
        grads, dx = mlp_backward(head, cache.extra, ds[:, None])
        return dx, -dx, grads
    raise InvalidArgumentError(f"unknown score function {cache.kind!r}")


# --------------------------------------------------------------------------
# Gradient checking
# --------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_error: float
    n_checked: int
    tolerance: float
    worst: str = ""

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def relative_error(analytic, numeric, floor=1e-6) -> np.ndarray:
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    return np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)


def finite_difference_check(
    loss_fn: Callable[[], float],
    params: list[tuple[str, np.ndarray]],
    analytic: Sequence[np.ndarray],
    h: float = 1e-5,
    tolerance: float = 1e-4,
    max_per_param: int | None = None,
    rng=None,
) -> GradCheckReport:
    """Compare ``analytic`` gradients with central differences of ``loss_fn``.

    ``loss_fn`` is re-evaluated after each in-place nudge of a parameter entry.
    With ``max_per_param`` set, a seeded subset of entries is checked per tensor.
    """
    worst, worst_name, count = 0.0, "", 0
    for (name, p), g in zip(params, analytic):
        flat = p.reshape(-1)
        gflat = np.asarray(g).reshape(-1)
        idx = np.arange(flat.size)
        if max_per_param is not None and flat.size > max_per_param:
            idx = (rng or np.random.default_rng(0)).choice(flat.size, max_per_param, replace=False)
        for i in idx:
            old = flat[i]
            flat[i] = old + h
            fp = loss_fn()
            flat[i] = old - h
            fm = loss_fn()
            flat[i] = old
            num = (fp - fm) / (2 * h)
            err = float(relative_error(gflat[i], num))
            count += 1
            if err > worst:
                worst, worst_name = err, f"{name}[{i}]"
    return GradCheckReport(worst, count, tolerance, worst_name)


def gradient_check(net: Mlp, tolerance: float = 1e-4, seed: int = 0, batch: int = 5, h: float = 1e-5,
                   score: str | None = None) -> GradCheckReport:
    """Check ``mlp_backward`` (optionally composed with a score function) on a seeded instance.

    Without ``score`` the scalar checked is ``sum(R * net(X))`` for a random ``R``.
    With ``score`` the net output is scored against random latents and the
    scalar is ``sum(r * scores)``; for ``"learned"`` a random 2-layer head is drawn.
    """
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(batch, net.in_dim))
    head = None
    if score == "learned":
        head = Mlp.init([net.out_dim, 8, 1], rng, output="sigmoid")
    if score is None:
        r = rng.normal(size=(batch, net.out_dim))
    else:
        other = rng.normal(size=(batch, net.out_dim))
        r = rng.normal(size=batch)

    def loss():
        y = mlp_forward(net, x)[0]
        if score is None:
            return float(np.sum(r * y))
        s = score_rows(score, other, y, head)[0]
        return float(np.sum(r * s))

    y, cache = mlp_forward(net, x)
    if score is None:
        dy = r
        head_grads = None
    else:
        _, _, sc = score_rows(score, other, y, head)
        _, dy, head_grads = score_rows_backward(sc, r, head)
    grads, _ = mlp_backward(net, cache, dy)
    params = net.named_parameters("net.")
    analytic = flatten_grads(grads)
    if head is not None:
        params = params + head.named_parameters("head.")
        analytic = analytic + flatten_grads(head_grads)
    return finite_difference_check(loss, params, analytic, h=h, tolerance=tolerance)
