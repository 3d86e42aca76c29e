"""Activations, network configuration, parameters and the ResNet forward map.

The network is

    x^[1] = sqrt(c_sigma / m) * sigma(W^[1] x)
    x^[l] = x^[l-1] + c_res / (L sqrt(m)) * sigma(W^[l] x^[l-1]),   2 <= l <= L
    f(x)  = a . x^[L]

with every weight drawn i.i.d. N(0, 1).  ``forward`` accepts a single input of
shape ``(d,)`` or a batch of shape ``(n, d)``; all cached arrays carry the same
leading batch axis.
"""

from __future__ import annotations

import dataclasses
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.special import expit

from . import linalg
from .quadrature import expect_1d

ScalarMap = Callable[[np.ndarray], np.ndarray]


# -- activations ----------------------------------------------------------------


@dataclass(frozen=True)
class Activation:
    kind: str
    value: ScalarMap = field(repr=False, compare=False)
    d1: ScalarMap = field(repr=False, compare=False)
    d2: ScalarMap = field(repr=False, compare=False)

    def __call__(self, x):
        return self.value(x)


def _softplus(x):
    # logaddexp(0, x) == x + log1p(exp(-x)) for large x, no overflow
    return np.logaddexp(0.0, x)


def _sigmoid_d1(x):
    s = expit(x)
    return s * (1.0 - s)


def _sigmoid_d2(x):
    s = expit(x)
    return s * (1.0 - s) * (1.0 - 2.0 * s)


ACTIVATIONS = {
    "softplus": Activation("softplus", _softplus, expit, _sigmoid_d1),
    "sigmoid": Activation("sigmoid", expit, _sigmoid_d1, _sigmoid_d2),
    "identity": Activation(
        "identity", lambda x: np.asarray(x, dtype=float) * 1.0, np.ones_like, np.zeros_like
    ),
    # test stub: kills every layer output
    "zero": Activation("zero", np.zeros_like, np.zeros_like, np.zeros_like),
}


def get_activation(name: str | Activation) -> Activation:
    if isinstance(name, Activation):
        return name
    try:
        return ACTIVATIONS[name]
    except KeyError:
        raise ValueError(f"unknown activation {name!r}; choose from {sorted(ACTIVATIONS)}") from None


def compute_c_sigma(activation, nodes: int = 200) -> float:
    """c_sigma = 1 / E_{x~N(0,1)}[sigma(x)^2] by Gauss-Hermite quadrature.

    The result is cross-checked against a rule with twice the nodes.
    """
    act = get_activation(activation)
    second_moment = float(expect_1d(lambda x: act(x) ** 2, nodes=nodes))
    if second_moment <= 1e-300:
        raise ValueError(f"degenerate activation {act.kind!r}: E[sigma^2] = {second_moment:.3e}")
    check = float(expect_1d(lambda x: act(x) ** 2, nodes=2 * nodes))
    if abs(check - second_moment) > 1e-10 * second_moment:
        raise ArithmeticError(
            f"c_sigma quadrature unresolved for {act.kind!r}: {second_moment!r} vs {check!r}"
        )
    return 1.0 / second_moment


# -- configuration ----------------------------------------------------------------


@dataclass(frozen=True)
class NetworkConfig:
    d: int
    m: int
    L: int
    c_res: float = 0.5
    activation: Activation = field(default_factory=lambda: ACTIVATIONS["softplus"])
    c_sigma: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "activation", get_activation(self.activation))
        if self.d < 1 or self.m < 1:
            raise ValueError(f"dimensions must be positive (d={self.d}, m={self.m})")
        if self.L < 2:
            raise ValueError(f"depth L must be >= 2, got {self.L}")
        if not 0.0 < self.c_res < 1.0:
            raise ValueError(f"c_res must lie in (0, 1), got {self.c_res}")
        if self.c_sigma is None:
            if self.activation.kind == "zero":
                c_sigma = 1.0
            else:
                c_sigma = compute_c_sigma(self.activation)
            object.__setattr__(self, "c_sigma", c_sigma)
        if not self.c_sigma > 0:
            raise ValueError("c_sigma must be positive")

    def with_(self, **changes) -> "NetworkConfig":
        """Copy with fields replaced; c_sigma is recomputed if the activation changes."""
        if "activation" in changes and "c_sigma" not in changes:
            changes["c_sigma"] = None
        return dataclasses.replace(self, **changes)

    def layer_scale(self, l: int) -> float:
        """Coefficient multiplying sigma(W^[l] x^[l-1]) in layer l."""
        if l == 1:
            return float(np.sqrt(self.c_sigma / self.m))
        return self.c_res / (self.L * np.sqrt(self.m))


# -- parameters --------------------------------------------------------------------


@dataclass
class ParamBlocks:
    """Block vector (W^[1], W^[2..L], a) with vector-space arithmetic.

    ``W`` is stacked as an array of shape (L-1, m, m); ``W[l - 2]`` is W^[l].
    """

    W1: np.ndarray
    W: np.ndarray
    a: np.ndarray

    def layer(self, l: int) -> np.ndarray:
        if l == 1:
            return self.W1
        if not 2 <= l <= self.W.shape[0] + 1:
            raise IndexError(f"layer {l} out of range")
        return self.W[l - 2]

    def blocks(self):
        return [self.W1, *self.W, self.a]

    def apply(self, l: int, X: np.ndarray) -> np.ndarray:
        """Rows of ``X`` mapped by W^[l] (that is, X W^[l]^T)."""
        return X @ self.layer(l).T

    def apply_T(self, l: int, U: np.ndarray) -> np.ndarray:
        """Rows of ``U`` mapped by W^[l]^T (that is, U W^[l])."""
        return U @ self.layer(l)

    def flatten(self) -> np.ndarray:
        return np.concatenate([self.W1.ravel(), self.W.ravel(), self.a.ravel()])

    @classmethod
    def unflatten(cls, vec: np.ndarray, like: "ParamBlocks"):
        i = like.W1.size
        j = i + like.W.size
        return cls(
            vec[:i].reshape(like.W1.shape).copy(),
            vec[i:j].reshape(like.W.shape).copy(),
            vec[j:].reshape(like.a.shape).copy(),
        )

    def copy(self):
        return type(self)(self.W1.copy(), self.W.copy(), self.a.copy())

    def __add__(self, other):
        return type(self)(self.W1 + other.W1, self.W + other.W, self.a + other.a)

    def __sub__(self, other):
        return type(self)(self.W1 - other.W1, self.W - other.W, self.a - other.a)

    def __mul__(self, s: float):
        return type(self)(s * self.W1, s * self.W, s * self.a)

    __rmul__ = __mul__

    def axpy(self, alpha: float, other: "ParamBlocks"):
        """Return ``self + alpha * other`` as the type of ``self``."""
        return type(self)(self.W1 + alpha * other.W1, self.W + alpha * other.W, self.a + alpha * other.a)

    def frobenius(self) -> float:
        return float(np.sqrt(sum(np.sum(b * b) for b in (self.W1, self.W, self.a))))

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(b)) for b in (self.W1, self.W, self.a))


class Params(ParamBlocks):
    """The network parameter vector theta."""


def init_params(config: NetworkConfig, seed: int) -> Params:
    """All blocks i.i.d. N(0, 1), drawn in the order W^[1], W^[2..L], a."""
    rng = linalg.make_rng(seed)
    m, d, L = config.m, config.d, config.L
    W1 = linalg.gaussian_matrix(m, d, rng)
    W = np.stack([linalg.gaussian_matrix(m, m, rng) for _ in range(L - 1)])
    a = linalg.gaussian_vector(m, rng)
    return Params(W1, W, a)


# -- data --------------------------------------------------------------------------


@dataclass(frozen=True)
class Dataset:
    inputs: np.ndarray  # (n, d), unit rows
    labels: np.ndarray  # (n,)
    bounded: bool = field(default=True, repr=False, compare=False)  # enforce |y| <= 1

    def __post_init__(self):
        X = np.atleast_2d(np.asarray(self.inputs, dtype=np.float64))
        y = np.asarray(self.labels, dtype=np.float64).reshape(-1)
        object.__setattr__(self, "inputs", X)
        object.__setattr__(self, "labels", y)
        if X.shape[0] != y.shape[0]:
            raise ValueError(f"{X.shape[0]} inputs but {y.shape[0]} labels")
        norms = np.linalg.norm(X, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-12):
            raise ValueError("every input must have unit Euclidean norm")
        if self.bounded and np.any(np.abs(y) > 1.0):
            raise ValueError("labels must satisfy |y| <= 1")
        G = X @ X.T
        off = np.abs(G[~np.eye(len(y), dtype=bool)])
        if off.size and np.max(off) >= 1.0 - 1e-9:
            raise ValueError("inputs must be pairwise non-parallel")

    @property
    def n(self) -> int:
        return self.labels.shape[0]

    @property
    def d(self) -> int:
        return self.inputs.shape[1]

    def with_labels(self, labels, bounded: bool = True) -> "Dataset":
        """Same inputs, new labels; ``bounded=False`` admits the network's own outputs."""
        return Dataset(self.inputs, labels, bounded)


def make_dataset(n: int, d: int, seed: int, parallel_tol: float = 1e-6) -> Dataset:
    """Uniform unit-sphere inputs with near-parallel pairs rejected; labels U(-1, 1)."""
    rng = linalg.make_rng(seed)
    rows: list[np.ndarray] = []
    for _ in range(1000 * n):
        if len(rows) == n:
            break
        x = rng.standard_normal(d)
        x /= np.linalg.norm(x)
        if all(abs(x @ r) < 1.0 - parallel_tol for r in rows):
            rows.append(x)
    else:
        raise RuntimeError(f"could not draw {n} non-parallel unit vectors in R^{d}")
    labels = rng.uniform(-1.0, 1.0, size=n)
    return Dataset(np.array(rows), labels)


# -- forward pass ------------------------------------------------------------------------


@dataclass
class ForwardCache:
    """Layer outputs and pre-activations; index ``l`` is layer ``l``.

    ``x[0]`` is the input.  ``z[0]`` and ``sprime[0]`` are ``None`` so that
    ``z[l] = W^[l] x^[l-1]`` and ``sprime[l] = sigma'(z[l])`` line up with the
    layer numbering.
    """

    x: list
    z: list
    sprime: list

    @property
    def L(self) -> int:
        return len(self.x) - 1

    @property
    def output_layer(self) -> np.ndarray:
        return self.x[-1]

    def sample(self, i: int) -> "ForwardCache":
        pick = lambda arrs: [None if v is None else v[i] for v in arrs]  # noqa: E731
        return ForwardCache(pick(self.x), pick(self.z), pick(self.sprime))


def forward(config: NetworkConfig, params: Params, x) -> ForwardCache:
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(np.atleast_2d(x), axis=-1)
    if np.any(np.abs(norms - 1.0) > 1e-9):
        warnings.warn("forward called with a non-unit input", RuntimeWarning, stacklevel=2)

    act = config.activation
    xs, zs, sps = [x], [None], [None]
    for l in range(1, config.L + 1):
        z = params.apply(l, xs[-1])
        h = act(z)
        if l == 1:
            out = config.layer_scale(1) * h
        else:
            out = xs[-1] + config.layer_scale(l) * h
        if not np.all(np.isfinite(out)):
            raise FloatingPointError(f"non-finite output at layer {l}")
        xs.append(out)
        zs.append(z)
        sps.append(act.d1(z))
    return ForwardCache(xs, zs, sps)


def network_output(cache: ForwardCache, params: Params):
    """f(x, theta) = a . x^[L]; scalar for one sample, vector for a batch."""
    out = cache.x[-1] @ params.a
    return float(out) if np.ndim(out) == 0 else out


def feedforward_norms(config: NetworkConfig, params: Params, x, gain: float = 2.0) -> np.ndarray:
    """Layer-output norms of the same weights wired without skip connections.

    x^[l] = gain * sqrt(c_sigma / m) * sigma(W^[l] x^[l-1]).  The default gain of
    2 matches the operator norm ||W||/sqrt(m) ~ 2 of a square Gaussian matrix.
    """
    act = config.activation
    s = np.sqrt(config.c_sigma / config.m)
    h = s * act(params.W1 @ np.asarray(x, dtype=np.float64))
    norms = [np.linalg.norm(h)]
    for l in range(2, config.L + 1):
        h = gain * s * act(params.layer(l) @ h)
        norms.append(np.linalg.norm(h))
    return np.array(norms)
