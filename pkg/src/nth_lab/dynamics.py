"""Gradients, gradient flow and spectral diagnostics for the ResNet.

Everything here works on the rank-one structure of the per-sample gradients:

    d f / d W^[l] = s_l * g_l (x^[l-1])^T,   g_l = sigma'_[l] * (E^[(l+1):L])^T a,
    d f / d a     = x^[L],

where ``s_1 = sqrt(c_sigma/m)``, ``s_l = c_res/(L sqrt(m))`` and the skip
matrices are ``E^[l] = I + (c_res/L) diag(sigma'_[l]) W^[l] / sqrt(m)``.  The
vectors ``(E^[(l+1):L])^T a`` are accumulated backwards from ``a`` with one
matrix-vector product per layer; no skip product is ever formed unless asked
for explicitly.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import linalg
from .model import Dataset, ForwardCache, NetworkConfig, ParamBlocks, Params, forward


class StepSizeWarning(RuntimeWarning):
    """The loss went up across an explicit integration step."""


class GradTheta(ParamBlocks):
    """Gradient with the same block layout as :class:`Params`."""


@dataclass
class SkipProduct:
    l_from: int
    l_to: int
    matrix: np.ndarray


def _check_layer(config: NetworkConfig, l: int, lo: int = 2) -> None:
    if not lo <= l <= config.L:
        raise IndexError(f"layer {l} outside [{lo}, {config.L}]")


def skip_matrix(config: NetworkConfig, params: Params, cache: ForwardCache, l: int,
                c_res: float | None = None) -> np.ndarray:
    """Dense E^[l] for a single-sample cache.

    ``c_res`` overrides the configured constant (tests use 0 to get I).
    """
    _check_layer(config, l)
    c = config.c_res if c_res is None else c_res
    sp = np.asarray(cache.sprime[l])
    if sp.ndim != 1:
        raise ValueError("skip_matrix needs a single-sample cache")
    m = config.m
    return np.eye(m) + (c / config.L) * (sp[:, None] * params.layer(l)) / np.sqrt(m)


def skip_product(config: NetworkConfig, params: Params, cache: ForwardCache,
                 l_from: int, l_to: int) -> SkipProduct:
    """E^[l_to] ... E^[l_from]; the identity when ``l_from > l_to``."""
    M = np.eye(config.m)
    for l in range(l_from, l_to + 1):
        M = skip_matrix(config, params, cache, l) @ M
    return SkipProduct(l_from, l_to, M)


def backward_vectors(config: NetworkConfig, params: Params, cache: ForwardCache, start=None) -> list:
    """u[l] = (E^[(l+1):L])^T start for l = 1..L (``u[0]`` is None).

    ``start`` defaults to ``a`` and may carry leading axes; it is broadcast
    against the cache's batch axis.
    """
    L = config.L
    u = params.a if start is None else np.asarray(start, dtype=np.float64)
    u = np.broadcast_to(u, np.broadcast_shapes(np.shape(u), np.shape(cache.sprime[L])))
    out = [None] * (L + 1)
    out[L] = u
    for l in range(L, 1, -1):
        u = u + config.layer_scale(l) * params.apply_T(l, cache.sprime[l] * u)
        out[l - 1] = u
    return out


def output_vectors(config: NetworkConfig, params: Params, cache: ForwardCache) -> list:
    """g[l] = sigma'_[l] * (E^[(l+1):L])^T a, the column factor of d f / d W^[l]."""
    u = backward_vectors(config, params, cache)
    return [None] + [cache.sprime[l] * u[l] for l in range(1, config.L + 1)]


def grad_theta_f(config: NetworkConfig, params: Params, cache: ForwardCache) -> GradTheta:
    """Per-sample gradient of f(x, theta) for a single-sample cache."""
    if np.ndim(cache.x[-1]) != 1:
        raise ValueError("grad_theta_f needs a single-sample cache")
    g = output_vectors(config, params, cache)
    gW1 = config.layer_scale(1) * np.outer(g[1], cache.x[0])
    gW = np.stack([config.layer_scale(l) * np.outer(g[l], cache.x[l - 1]) for l in range(2, config.L + 1)])
    return GradTheta(gW1, gW, cache.x[-1].copy())


def residuals(config: NetworkConfig, params: Params, dataset: Dataset, cache: ForwardCache | None = None):
    if cache is None:
        cache = forward(config, params, dataset.inputs)
    return cache.x[-1] @ params.a - dataset.labels


def loss(config: NetworkConfig, params: Params, dataset: Dataset) -> float:
    """R_S = (1 / 2n) sum (f - y)^2."""
    r = residuals(config, params, dataset)
    return float(0.5 * np.mean(r * r))


@dataclass
class FactoredGrad:
    """Gradient of R_S with every weight block kept as P_l^T Q_l (rank <= n).

    ``P[l - 1]`` is (n, m) and ``Q[l - 1]`` is (n, fan-in of layer l).
    """

    P: list
    Q: list
    ga: np.ndarray

    def dense(self) -> GradTheta:
        blocks = [P.T @ Q for P, Q in zip(self.P, self.Q)]
        return GradTheta(blocks[0], np.stack(blocks[1:]), self.ga.copy())


def grad_loss_factors(config: NetworkConfig, params, dataset: Dataset,
                      cache: ForwardCache | None = None):
    """Factored gradient of R_S and the residuals f - y.

    The sample sum lives in the inner dimension of ``P^T Q`` and is reduced
    in the fixed sample order.
    """
    if cache is None:
        cache = forward(config, params, dataset.inputs)
    r = cache.x[-1] @ params.a - dataset.labels
    n = dataset.n
    g = output_vectors(config, params, cache)
    P = [(config.layer_scale(l) / n) * (g[l] * r[:, None]) for l in range(1, config.L + 1)]
    Q = [cache.x[l - 1] for l in range(1, config.L + 1)]
    return FactoredGrad(P, Q, (r @ cache.x[-1]) / n), r


def grad_loss(config: NetworkConfig, params: Params, dataset: Dataset,
              cache: ForwardCache | None = None):
    """Gradient of R_S (as :class:`GradTheta`) and the residuals f - y."""
    fg, r = grad_loss_factors(config, params, dataset, cache)
    return fg.dense(), r


# -- gradient flow -------------------------------------------------------------------


@dataclass
class FlowState:
    t: float
    params: Params
    step: float
    scheme: str = "rk4"
    warnings: list = field(default_factory=list)

    def __post_init__(self):
        if not self.step > 0:
            raise ValueError("step must be positive")
        if self.scheme not in ("euler", "rk4"):
            raise ValueError(f"unknown scheme {self.scheme!r}")


class ShiftedParams:
    """theta + sum_j c_j * g_j for factored gradients g_j, never densified.

    Products with the shifted weights cost O(n m) extra per layer, so the
    intermediate rk4 stages never copy an m x m block.
    """

    def __init__(self, base: Params, terms=()):
        self.base = base
        self.terms = list(terms)
        self.a = base.a + sum(c * g.ga for c, g in self.terms) if self.terms else base.a

    def apply(self, l: int, X):
        out = self.base.apply(l, X)
        for c, g in self.terms:
            out = out + c * ((X @ g.Q[l - 1].T) @ g.P[l - 1])
        return out

    def apply_T(self, l: int, U):
        out = self.base.apply_T(l, U)
        for c, g in self.terms:
            out = out + c * ((U @ g.P[l - 1].T) @ g.Q[l - 1])
        return out

    def materialize(self) -> Params:
        if not self.terms:
            return self.base.copy()
        blocks = []
        for i, W in enumerate([self.base.W1, *self.base.W]):
            P = np.concatenate([c * g.P[i] for c, g in self.terms])
            Q = np.concatenate([g.Q[i] for _, g in self.terms])
            blocks.append(W + P.T @ Q)
        return Params(blocks[0], np.stack(blocks[1:]), self.a.copy())


def advance(config: NetworkConfig, params: Params, dataset: Dataset, h: float, scheme: str = "rk4") -> Params:
    """One explicit step of d theta/dt = -grad R_S; ``h`` may be negative."""
    def grad(p):
        return grad_loss_factors(config, p, dataset)[0]

    k1 = grad(params)
    if scheme == "euler":
        return ShiftedParams(params, [(-h, k1)]).materialize()
    k2 = grad(ShiftedParams(params, [(-0.5 * h, k1)]))
    k3 = grad(ShiftedParams(params, [(-0.5 * h, k2)]))
    k4 = grad(ShiftedParams(params, [(-h, k3)]))
    w = -h / 6.0
    return ShiftedParams(params, [(w, k1), (2 * w, k2), (2 * w, k3), (w, k4)]).materialize()


def flow_step(state: FlowState, config: NetworkConfig, dataset: Dataset, check_loss: bool = True) -> FlowState:
    before = loss(config, state.params, dataset) if check_loss else None
    new_params = advance(config, state.params, dataset, state.step, state.scheme)
    if not new_params.is_finite():
        raise FloatingPointError(f"integration blew up at t={state.t + state.step:.6g}")
    notes = list(state.warnings)
    if check_loss:
        after = loss(config, new_params, dataset)
        if after > before + 1e-12:
            msg = f"loss rose from {before:.17g} to {after:.17g} at t={state.t + state.step:.6g}"
            notes.append(msg)
            warnings.warn(msg, StepSizeWarning, stacklevel=2)
    return FlowState(state.t + state.step, new_params, state.step, state.scheme, notes)


def default_step(lambda_hat: float, n: int, lambda_max: float | None = None) -> float:
    """h = 1e-3 * n / lambda_hat: a thousand steps per e-folding of the slowest mode.

    With ``lambda_max`` the step is also capped at 0.1 * n / lambda_max so the
    fastest mode is resolved (rk4 is unstable beyond h * lambda_max / n ~ 2.8).
    """
    if not lambda_hat > 0:
        raise ValueError(f"lambda_hat must be positive, got {lambda_hat}")
    h = 1e-3 * n / lambda_hat
    if lambda_max is not None:
        h = min(h, 0.1 * n / lambda_max)
    return h


def integrate(config: NetworkConfig, params: Params, dataset: Dataset, T: float, step: float,
              scheme: str = "rk4", observer=None, check_loss: bool = True) -> FlowState:
    """Integrate the flow to time T; the last step is shortened to land on T.

    ``observer(state)`` is called at t = 0 and after every step.
    """
    n_steps = max(1, int(np.ceil(T / step - 1e-9)))
    state = FlowState(0.0, params, step, scheme)
    if observer is not None:
        observer(state)
    for k in range(n_steps):
        h = min(step, T - state.t) if k == n_steps - 1 else step
        state = flow_step(FlowState(state.t, state.params, h, scheme, state.warnings), config, dataset,
                          check_loss=check_loss)
        if k == n_steps - 1:
            state.t = T
        if observer is not None:
            observer(state)
    state.step = step
    return state


# -- spectral diagnostics ----------------------------------------------------------------------


@dataclass(frozen=True)
class SpectralDiag:
    xi: float
    omega: float


def spectral_diag(config: NetworkConfig, params: Params, tol: float = 1e-10) -> SpectralDiag:
    """xi = max(1, ||W^[l]||_2 / sqrt(m) for l >= 2, ||a|| / sqrt(m)); omega = max 2->inf norm.

    ||W^T||_2 equals ||W||_2, so each block is measured once.  omega is left
    unnormalised and takes both W^[l] and its transpose.
    """
    rt = np.sqrt(config.m)
    norms = [linalg.spectral_norm(params.layer(l), tol=tol) / rt for l in range(2, config.L + 1)]
    norms.append(float(np.linalg.norm(params.a)) / rt)
    omega = 0.0
    for l in range(2, config.L + 1):
        W = params.layer(l)
        omega = max(omega, linalg.two_to_infinity_norm(W), linalg.two_to_infinity_norm(W.T))
    return SpectralDiag(max(1.0, *norms), omega)
