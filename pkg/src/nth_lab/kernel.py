"""Empirical tangent kernels of the ResNet.

The NTK splits over parameter blocks,

    K(x_a, x_b) = sum_{l=1}^{L+1} G^[l](x_a, x_b),

with ``G^[l] = s_l^2 <g_l(a), g_l(b)> <x_a^[l-1], x_b^[l-1]>`` for the weight
blocks and ``G^[L+1] = <x_a^[L], x_b^[L]>`` for the output weights.

``g3_kernel`` evaluates the third-order kernel that drives ``G^[L+1]``:

    d/dt G^[L+1](a1, a2) = -(1/n) sum_b G3[a1, a2, b] (f_b - y_b).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import linalg
from .dynamics import advance, backward_vectors, output_vectors, residuals
from .model import Dataset, ForwardCache, NetworkConfig, Params, forward

PSD_RTOL = 1e-8


@dataclass
class GramMatrix:
    data: np.ndarray
    kind: str = "empirical_K2"

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)

    @property
    def n(self) -> int:
        return self.data.shape[0]

    def lambda_min(self) -> float:
        return linalg.sym_eig_min(linalg.symmetrize(self.data))

    def check_psd(self) -> None:
        n = self.n
        floor = -PSD_RTOL * abs(np.trace(self.data)) / max(n, 1)
        lam = self.lambda_min()
        if lam < floor:
            raise linalg.NotPSDError(f"{self.kind} has lambda_min {lam:.3e} < {floor:.3e}")


@dataclass
class KernelSnapshot:
    t: float
    K2: GramMatrix
    per_layer: list | None
    lambda_min: float

    @property
    def output_kernel(self) -> GramMatrix:
        """G^[L+1], the kernel whose drift the third-order kernel predicts."""
        if self.per_layer is None:
            raise ValueError("snapshot was taken without the per-layer split")
        return self.per_layer[-1]


def layer_kernels(config: NetworkConfig, params: Params, cache: ForwardCache) -> np.ndarray:
    """Stack of shape (L+1, n, n); entry ``l - 1`` is G^[l]."""
    if np.ndim(cache.x[-1]) != 2:
        raise ValueError("layer_kernels needs a batched cache")
    g = output_vectors(config, params, cache)
    out = []
    for l in range(1, config.L + 1):
        s2 = config.layer_scale(l) ** 2
        out.append(s2 * (g[l] @ g[l].T) * (cache.x[l - 1] @ cache.x[l - 1].T))
    out.append(cache.x[-1] @ cache.x[-1].T)
    return np.stack([linalg.symmetrize(G) for G in out])


def layer_kernel(config: NetworkConfig, params: Params, cache: ForwardCache, l: int) -> GramMatrix:
    if not 1 <= l <= config.L + 1:
        raise IndexError(f"layer {l} outside [1, {config.L + 1}]")
    return GramMatrix(layer_kernels(config, params, cache)[l - 1], kind=f"layer_G({l})")


def empirical_ntk(config: NetworkConfig, params: Params, dataset: Dataset, t: float = 0.0,
                  cache: ForwardCache | None = None) -> KernelSnapshot:
    if cache is None:
        cache = forward(config, params, dataset.inputs)
    G = layer_kernels(config, params, cache)
    K2 = GramMatrix(linalg.symmetrize(G.sum(axis=0)), kind="empirical_K2")
    per_layer = [GramMatrix(G[i], kind=f"layer_G({i + 1})") for i in range(G.shape[0])]
    return KernelSnapshot(t, K2, per_layer, K2.lambda_min())


def g3_terms(config: NetworkConfig, params: Params, cache: ForwardCache) -> np.ndarray:
    """Unsymmetrised term groups T[k - 1, a1, a2, b] of the third-order kernel.

    T[0] is the first-layer group (prefactor c_sigma/m, input overlaps) and
    T[k - 1] for k >= 2 the residual-layer summand (prefactor c_res^2/(L^2 m),
    overlaps of x^[k-1]).  With T = sum_k T[k - 1],
    G3[a1, a2, b] = T[a1, a2, b] + T[a2, a1, b].
    """
    L, n = config.L, cache.x[0].shape[0]
    g = output_vectors(config, params, cache)  # indexed by b
    xL = cache.x[-1]
    overlaps = [None] + [cache.x[k - 1] @ cache.x[k - 1].T for k in range(1, L + 1)]
    T = np.zeros((L, n, n, n))
    for a1 in range(n):
        single = cache.sample(a1)
        # q[k][a2] = (E_{a1}^[(k+1):L])^T x_{a2}^[L]
        q = backward_vectors(config, params, single, start=xL)
        for k in range(1, L + 1):
            c = config.layer_scale(k) ** 2
            inner = (q[k] * single.sprime[k]) @ g[k].T  # (a2, b)
            T[k - 1, a1] = c * inner * overlaps[k][a1][None, :]
    return T


def g3_kernel(config: NetworkConfig, params: Params, cache: ForwardCache, k_max: int | None = None) -> np.ndarray:
    """Dense (n, n, n) third-order kernel of G^[L+1].

    ``k_max`` truncates the residual-layer sum to k <= k_max (term accounting).
    """
    T = g3_terms(config, params, cache)
    if k_max is not None:
        T = T[:k_max]
    T = T.sum(axis=0)
    return T + T.transpose(1, 0, 2)


def effective_terms(r: int, L: int) -> float:
    """Term count C(r, L) with each 1/L^2-suppressed term weighted by 1/L^2."""
    if r == 2:
        return 1.0
    if r == 3:
        return 2.0 * (1.0 + (L - 1) / L**2)
    if r == 4:
        return 2.0 * ((2 * L + 2) * (L + 1) + (L - 1) * (2 * L + 2) * (L + 1) / L**2)
    raise ValueError("effective term counts are tabulated for r = 2, 3, 4 only")


def nth_residual(K_before: GramMatrix, K_after: GramMatrix, delta: float, g3: np.ndarray,
                 resid: np.ndarray) -> dict:
    """Mismatch between the finite-difference kernel drift and the hierarchy.

    ``K_before``/``K_after`` are snapshots a time ``delta`` apart, ``g3`` and
    ``resid`` are evaluated at their midpoint.  Returns the max-abs residual of
    (K_after - K_before)/delta + (1/n) sum_b g3[:, :, b] resid[b], the max-abs
    drift it is compared against, and their ratio.
    """
    if not delta > 0:
        raise ValueError("delta must be positive")
    n = resid.shape[0]
    drift = (K_after.data - K_before.data) / delta
    predicted = -(g3 @ resid) / n
    res = float(np.max(np.abs(drift - predicted)))
    scale = float(np.max(np.abs(drift)))
    return {
        "residual": res,
        "drift_inf": scale,
        "relative": res / scale if scale > 0 else (0.0 if res == 0 else np.inf),
    }


def nth_check_at(config: NetworkConfig, params: Params, dataset: Dataset, delta: float,
                 substeps: int = 1) -> dict:
    """Central-difference test of the order-2/order-3 hierarchy at ``params``.

    The flow is integrated delta/2 forwards and backwards (rk4) to obtain the
    output kernel G^[L+1] on both sides of the current time.
    """
    h = 0.5 * delta / substeps
    fwd, bwd = params, params
    for _ in range(substeps):
        fwd = advance(config, fwd, dataset, h)
        bwd = advance(config, bwd, dataset, -h)
    K_plus = GramMatrix(layer_kernels(config, fwd, forward(config, fwd, dataset.inputs))[-1])
    K_minus = GramMatrix(layer_kernels(config, bwd, forward(config, bwd, dataset.inputs))[-1])
    cache = forward(config, params, dataset.inputs)
    g3 = g3_kernel(config, params, cache)
    r = residuals(config, params, dataset, cache)
    return nth_residual(K_minus, K_plus, delta, g3, r)


def kernel_regression_predict(K, f0, t: float, n: int | None = None) -> np.ndarray:
    """Residuals of the frozen-kernel flow: exp(-t K / n) (f(0) - y).

    ``f0`` is the initial residual vector.  Uses the Jacobi eigendecomposition.
    """
    K = K if isinstance(K, GramMatrix) else GramMatrix(K, kind="limit")
    f0 = np.asarray(f0, dtype=np.float64)
    n = K.n if n is None else n
    if t == 0:
        return f0.copy()
    w, V = linalg.jacobi_eigh(K.data)
    floor = -PSD_RTOL * abs(np.trace(K.data)) / max(K.n, 1)
    if w[0] < floor:
        raise linalg.NotPSDError(f"kernel has lambda_min {w[0]:.3e}")
    w = np.maximum(w, 0.0)
    return V @ (np.exp(-t * w / n) * (V.T @ f0))
