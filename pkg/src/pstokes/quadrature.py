"""Quadrature rules: 6-point order-4 triangle rule, 3-point Gauss on edges.

Triangle weights are normalized to sum to 1, so a physical integral is
``area * sum(w_q f(x_q))``.  Edge weights likewise sum to 1 against the
edge length.
"""

from __future__ import annotations

import numpy as np

__all__ = ["tri_points", "tri_weights", "edge_points", "edge_weights"]

# Degree-4 rule: two symmetric orbits of 3 points, barycentric (a, b, b).
_A1, _B1, _W1 = 0.816847572980459, 0.091576213509771, 0.109951743655322
_A2, _B2, _W2 = 0.108103018168070, 0.445948490915965, 0.223381589678011

_bary = np.array(
    [
        [_A1, _B1, _B1],
        [_B1, _A1, _B1],
        [_B1, _B1, _A1],
        [_A2, _B2, _B2],
        [_B2, _A2, _B2],
        [_B2, _B2, _A2],
    ]
)

# Reference coordinates (xi, eta) = (lambda_1, lambda_2).
tri_points = _bary[:, 1:].copy()
tri_weights = np.array([_W1, _W1, _W1, _W2, _W2, _W2])

# 3-point Gauss-Legendre on [0, 1], exact to degree 5.
_h = np.sqrt(3.0 / 20.0)
edge_points = np.array([0.5 - _h, 0.5, 0.5 + _h])
edge_weights = np.array([5.0, 8.0, 5.0]) / 18.0
