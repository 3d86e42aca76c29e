"""Gauss-Hermite rules for expectations under standard normals."""

from __future__ import annotations

from functools import lru_cache

import numpy as np
from scipy.special import roots_hermitenorm


@lru_cache(maxsize=None)
def normal_rule(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Nodes and weights with sum_i w_i f(x_i) ~= E_{x~N(0,1)} f(x)."""
    x, w = roots_hermitenorm(n)
    w = w / np.sqrt(2.0 * np.pi)
    x.setflags(write=False)
    w.setflags(write=False)
    return x, w


def expect_1d(f, var=1.0, nodes: int = 200):
    """E[f(u)] for u ~ N(0, var); ``var`` may be an array (broadcast)."""
    x, w = normal_rule(nodes)
    s = np.sqrt(np.asarray(var, dtype=np.float64))[..., None]
    return np.sum(w * f(s * x), axis=-1)
