"""Infinite-width Gram matrices of the ResNet.

The recursion (all expectations over centred bivariate normals whose 2x2
covariance is read off the previous layer)::

    Kt[0]_ij = <x_i, x_j>
    Kt[1]_ij = c_sigma E[s(u) s(v)],            bt[1]_i = sqrt(c_sigma) E[s(u)]
    Kt[l]_ij = Kt[l-1]_ij + E[(c/L) bt_i s(v) + (c/L) bt_j s(u) + (c/L)^2 s(u) s(v)]
    bt[l]_i  = bt[l-1]_i + (c/L) E[s(u)]                                 (2 <= l <= L)

``K_L1`` applies the residual step once more to ``Kt[L]`` and ``K_L`` is the
derivative kernel ``(c/L)^2 Kt[L-1]_ij E[s'(u) s'(v)]``.  Here ``c = c_res``.
The positivity anchor is ``lambda0 = lambda_min(Kt[1] - bt[1] bt[1]^T)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import linalg
from .dynamics import backward_vectors
from .model import Dataset, NetworkConfig, forward, get_activation, init_params
from .quadrature import expect_1d, normal_rule

RHO_COMONOTONE = 1.0 - 1e-10
RHO_CLAMP = 1e-12


class QuadratureError(ArithmeticError):
    """A Gaussian expectation in the recursion could not be evaluated."""


def _correlations(kii, kjj, kij):
    rho = kij / np.sqrt(kii * kjj)
    bad = np.abs(rho) > 1.0 + RHO_CLAMP
    if np.any(bad):
        idx = tuple(np.argwhere(bad)[0])
        raise QuadratureError(f"correlation {rho[idx]!r} outside [-1, 1] at entry {idx}")
    return np.clip(rho, -1.0, 1.0)


def bivariate_expect(kii, kjj, kij, f, g, nodes: int = 60) -> np.ndarray:
    """E[f(u) g(v)] for (u, v) ~ N(0, [[kii, kij], [kij, kjj]]), elementwise over arrays.

    Tensor Gauss-Hermite after whitening u = s_i z1, v = s_j (rho z1 + sqrt(1-rho^2) z2).
    Pairs with |rho| > 1 - 1e-10 use the exact one-dimensional comonotone limit.
    """
    kii, kjj, kij = np.broadcast_arrays(*(np.asarray(v, dtype=np.float64) for v in (kii, kjj, kij)))
    if np.any(kii <= 0) or np.any(kjj <= 0):
        raise QuadratureError("variances must be positive")
    si, sj = np.sqrt(kii), np.sqrt(kjj)
    rho = _correlations(kii, kjj, kij)
    x, w = normal_rule(nodes)

    out = np.empty(kii.shape)
    degenerate = np.abs(rho) > RHO_COMONOTONE
    full = ~degenerate
    if np.any(full):
        a, b, r = si[full][:, None, None], sj[full][:, None, None], rho[full][:, None, None]
        z1, z2 = x[None, :, None], x[None, None, :]
        u = a * z1
        v = b * (r * z1 + np.sqrt(1.0 - r * r) * z2)
        out[full] = np.einsum("i,j,kij->k", w, w, f(u) * g(v))
    if np.any(degenerate):
        a, b = si[degenerate][:, None], sj[degenerate][:, None]
        sgn = np.sign(rho[degenerate])[:, None]
        out[degenerate] = np.sum(w * f(a * x) * g(sgn * b * x), axis=-1)
    return out


def gauss2d_expect(A, f, g, nodes: int = 60) -> float:
    """E[f(u) g(v)] for (u, v) ~ N(0, A), A a 2x2 PSD covariance."""
    A = linalg.check_symmetric(A)
    linalg.cholesky_2x2(A)  # raises on non-PSD input
    return float(bivariate_expect(A[0, 0], A[1, 1], A[0, 1], f, g, nodes))


# -- the recursion -------------------------------------------------------------------------


@dataclass
class LimitKernelStack:
    Ktilde: list  # Kt[0..L], each (n, n)
    btilde: list  # bt[0..L]; bt[0] is None
    K_L1: np.ndarray
    K_L: np.ndarray
    lambda0: float
    hierarchy: list = field(default_factory=list)  # lambda_min(Kt[l] - bt bt^T), l = 1..L
    meta: dict = field(default_factory=dict)

    @property
    def L(self) -> int:
        return len(self.Ktilde) - 1


def _pairwise(K):
    d = np.diag(K)
    return d[:, None] * np.ones_like(K), d[None, :] * np.ones_like(K), K


def _residual_step(K, b, act, c_res, L, nodes):
    """One residual layer of the recursion: returns the next (K, b)."""
    kii, kjj, kij = _pairwise(K)
    try:
        mean_act = expect_1d(act.value, np.diag(K), nodes=max(nodes, 60))
        cross = bivariate_expect(kii, kjj, kij, act.value, act.value, nodes)
    except QuadratureError as exc:
        raise QuadratureError(f"{exc} in residual step") from exc
    step = c_res / L
    K_next = K + step * (b[:, None] * mean_act[None, :] + b[None, :] * mean_act[:, None]) + step**2 * cross
    return linalg.symmetrize(K_next), b + step * mean_act


def build_limit_stack(dataset: Dataset, activation, c_res: float, c_sigma: float, L: int,
                      nodes: int = 60) -> LimitKernelStack:
    act = get_activation(activation)
    X = dataset.inputs
    K0 = linalg.symmetrize(X @ X.T)

    kii, kjj, kij = _pairwise(K0)
    K1 = c_sigma * bivariate_expect(kii, kjj, kij, act.value, act.value, nodes)
    b1 = np.sqrt(c_sigma) * expect_1d(act.value, np.diag(K0), nodes=max(nodes, 60))
    Ks, bs = [K0, linalg.symmetrize(K1)], [None, b1]
    for l in range(2, L + 1):
        try:
            K, b = _residual_step(Ks[-1], bs[-1], act, c_res, L, nodes)
        except QuadratureError as exc:
            raise QuadratureError(f"layer {l}: {exc}") from exc
        Ks.append(K)
        bs.append(b)

    K_L1, _ = _residual_step(Ks[L], bs[L], act, c_res, L, nodes)

    kii, kjj, kij = _pairwise(Ks[L - 1])
    K_L = (c_res / L) ** 2 * Ks[L - 1] * bivariate_expect(kii, kjj, kij, act.d1, act.d1, nodes)
    K_L = linalg.symmetrize(K_L)

    hierarchy = [linalg.sym_eig_min(Ks[l] - np.outer(bs[l], bs[l])) for l in range(1, L + 1)]
    return LimitKernelStack(
        Ktilde=Ks,
        btilde=bs,
        K_L1=K_L1,
        K_L=K_L,
        lambda0=hierarchy[0],
        hierarchy=hierarchy,
        meta={"activation": act.kind, "c_res": c_res, "c_sigma": c_sigma, "L": L, "nodes": nodes},
    )


def lambda0(stack: LimitKernelStack) -> float:
    lam = stack.lambda0
    if not lam > 0:
        raise ValueError(f"lambda0 = {lam:.3e} is not positive; inputs may be parallel")
    return lam


def quadrature_agreement(dataset: Dataset, activation, c_res, c_sigma, L, coarse=60, fine=90) -> float:
    """Max-abs difference between every matrix of the stack at two node counts."""
    a = build_limit_stack(dataset, activation, c_res, c_sigma, L, nodes=coarse)
    b = build_limit_stack(dataset, activation, c_res, c_sigma, L, nodes=fine)
    diffs = [np.max(np.abs(x - y)) for x, y in zip(a.Ktilde, b.Ktilde)]
    diffs += [np.max(np.abs(x - y)) for x, y in zip(a.btilde[1:], b.btilde[1:])]
    diffs += [np.max(np.abs(a.K_L1 - b.K_L1)), np.max(np.abs(a.K_L - b.K_L))]
    return float(max(diffs))


def diagonal_band_constant(activation, c_res: float, c_sigma: float) -> float:
    """The constant c of the diagonal band (1 +- (l/L) c / sqrt(c_sigma))^2.

    C is the grid-measured Lipschitz constant of alpha -> c_sigma E[s(alpha X)^2]
    at alpha = 1 over alpha in [1/2, 2].
    """
    act = get_activation(activation)
    alphas = np.concatenate([np.linspace(0.5, 0.999, 200), np.linspace(1.001, 2.0, 200)])
    base = expect_1d(lambda x: act(x) ** 2, 1.0, nodes=200)
    moments = expect_1d(lambda x: act(x) ** 2, alphas**2, nodes=200)
    C = c_sigma * float(np.max(np.abs(moments - base) / np.abs(alphas - 1.0)))
    return C * c_res**2 / (2 * np.sqrt(c_sigma)) + np.sqrt(C**2 * c_res**4 / (4 * c_sigma) + c_res**2)


# -- finite-width estimates ----------------------------------------------------------------


def layer_overlap(config: NetworkConfig, params, cache, l: int) -> np.ndarray:
    """(1/m) <sigma'_[l](x_i) (E_i^[(l+1):L])^T a, same for j> at finite width."""
    u = backward_vectors(config, params, cache)
    g = cache.sprime[l] * u[l]
    return (g @ g.T) / config.m


def mc_layer_kernel(dataset: Dataset, config: NetworkConfig, l: int, m_probe: int, replicates: int,
                    seed: int, stack: LimitKernelStack | None = None):
    """Monte-Carlo estimate of the width-limit layer kernel K^[l].

    Returns ``(mean, stderr)``.  Replicate r uses seed ``seed + r``.  The
    prefactor c_sigma Kt[0] (l = 1) or (c_res/L)^2 Kt[l-1] comes from the
    quadrature stack; only the activation-pattern overlap is sampled.
    """
    if m_probe < 256 or replicates < 8:
        raise ValueError("need m_probe >= 256 and replicates >= 8")
    if not 1 <= l <= config.L:
        raise IndexError(f"layer {l} outside [1, {config.L}]")
    cfg = config.with_(m=m_probe)
    if stack is None:
        stack = build_limit_stack(dataset, cfg.activation, cfg.c_res, cfg.c_sigma, cfg.L)
    pref = cfg.c_sigma * stack.Ktilde[0] if l == 1 else (cfg.c_res / cfg.L) ** 2 * stack.Ktilde[l - 1]
    samples = []
    for r in range(replicates):
        params = init_params(cfg, seed + r)
        cache = forward(cfg, params, dataset.inputs)
        samples.append(pref * layer_overlap(cfg, params, cache, l))
    samples = np.array(samples)
    return samples.mean(axis=0), samples.std(axis=0, ddof=1) / np.sqrt(replicates)


def loglog_slope(x, y) -> float:
    """Least-squares slope of log y against log x."""
    return float(np.polyfit(np.log(np.asarray(x, float)), np.log(np.asarray(y, float)), 1)[0])


def init_concentration(dataset: Dataset, config: NetworkConfig, m_list, seeds, stack: LimitKernelStack | None = None) -> dict:
    """Gaps between initial finite-width Gram matrices and their width limits.

    For each (m, seed) row: max |<x_i^[l], x_j^[l]> - Kt[l]| at l = 1 and L,
    the output-kernel gap against Kt[L] (the limit of G^[L+1](0)) and against
    K_L1, and lambda_min(G^[L+1](0)).
    """
    if stack is None:
        stack = build_limit_stack(dataset, config.activation, config.c_res, config.c_sigma, config.L)
    L = config.L
    rows = []
    for m in m_list:
        cfg = config.with_(m=int(m))
        for seed in seeds:
            params = init_params(cfg, seed)
            cache = forward(cfg, params, dataset.inputs)
            G1 = cache.x[1] @ cache.x[1].T
            GL = linalg.symmetrize(cache.x[L] @ cache.x[L].T)
            rows.append({
                "m": int(m),
                "seed": int(seed),
                "gap_layer1": float(np.max(np.abs(G1 - stack.Ktilde[1]))),
                "gap_layerL": float(np.max(np.abs(GL - stack.Ktilde[L]))),
                "gap_output_vs_KL1": float(np.max(np.abs(GL - stack.K_L1))),
                "lambda_min_output": linalg.sym_eig_min(GL),
            })
    summary = {}
    for key in ("gap_layer1", "gap_layerL", "gap_output_vs_KL1", "lambda_min_output"):
        per_m = {}
        for m in m_list:
            vals = np.array([r[key] for r in rows if r["m"] == int(m)])
            per_m[int(m)] = {q: float(np.quantile(vals, p)) for q, p in (("min", 0), ("median", 0.5), ("max", 1))}
        summary[key] = per_m
    medians = [summary["gap_layerL"][int(m)]["median"] for m in m_list]
    summary["gap_layerL_slope"] = loglog_slope(m_list, medians) if len(m_list) >= 2 else float("nan")
    return {"rows": rows, "summary": summary, "lambda0": stack.lambda0}
