"""
Module 6: A Posteriori Estimation and Marking
Gradient-recovery (ZZ) error indicators and bulk (Dörfler) marking that drive the
adaptive loop.
"""

import os
import sys
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from modules.assembly import FeFunction, element_data, local_mass
from modules.mesh import Mesh
from utils.errors import ConfigError


@dataclass
class ZzIndicators:
    """Per-triangle indicators eta_K and the total estimator."""
    indicators: np.ndarray

    @property
    def total(self) -> float:
        return float(np.sqrt(np.sum(self.indicators ** 2)))

    def __len__(self):
        return len(self.indicators)


def element_gradients(mesh: Mesh, values: np.ndarray) -> np.ndarray:
    """Constant gradient of a P1 function on each triangle, shape (T, 2)."""
    data = element_data(mesh)
    return np.einsum('tid,ti->td', data.gradients, values[mesh.triangles])


def recovered_gradient(mesh: Mesh, values: np.ndarray) -> np.ndarray:
    """Area-weighted average of adjacent element gradients at every vertex, shape (V, 2)."""
    areas = mesh.areas()
    grads = element_gradients(mesh, values)
    weight = np.zeros(mesh.n_vertices)
    total = np.zeros((mesh.n_vertices, 2))
    for i in range(3):
        np.add.at(weight, mesh.triangles[:, i], areas)
        np.add.at(total, mesh.triangles[:, i], areas[:, None] * grads)
    return total / weight[:, None]


def zz_estimate(
    mesh: Mesh,
    u: Union[FeFunction, np.ndarray, None],
    full_values: Optional[np.ndarray] = None
) -> ZzIndicators:
    """
    ZZ indicators eta_K = ||G(u_h) - grad u_h||_{L2(K)}.

    Args:
        mesh: Mesh of u
        u: Interior coefficients (boundary values zero)
        full_values: Vertex values including the boundary (overrides u)

    Returns:
        ZzIndicators, one entry per triangle
    """
    if full_values is not None:
        values = np.asarray(full_values, dtype=float)
    else:
        coeffs = u.coeffs if isinstance(u, FeFunction) else np.asarray(u, dtype=float)
        values = mesh.expand(coeffs)

    data = element_data(mesh)
    grads = np.einsum('tid,ti->td', data.gradients, values[mesh.triangles])
    recovered = recovered_gradient(mesh, values)
    # G - grad u_h is P1 per component, so the element integral is exact with the local mass
    diff = recovered[mesh.triangles] - grads[:, None, :]          # (T, 3, 2)
    eta_sq = np.einsum('tid,tij,tjd->t', diff, local_mass(data), diff)
    return ZzIndicators(indicators=np.sqrt(np.maximum(eta_sq, 0.0)))


def dorfler_mark(indicators: Union[ZzIndicators, np.ndarray], theta: float) -> np.ndarray:
    """
    Minimal set of triangles carrying sum eta_K^2 >= theta^2 eta^2.

    Indicators are taken in descending order (stable on ties); the returned
    indices are sorted ascending.
    """
    if not 0.0 < theta < 1.0:
        raise ConfigError("dorfler_theta", f"must lie in (0, 1), got {theta}")
    eta = indicators.indicators if isinstance(indicators, ZzIndicators) else np.asarray(indicators, dtype=float)
    eta_sq = eta ** 2
    total = float(eta_sq.sum())
    if total == 0.0:
        return np.zeros(0, dtype=np.int64)
    order = np.argsort(-eta_sq, kind="stable")
    cumulative = np.cumsum(eta_sq[order])
    count = int(np.searchsorted(cumulative, theta ** 2 * total)) + 1
    return np.sort(order[:min(count, len(order))])


# Test
if __name__ == "__main__":
    from modules.mesh import build_unit_square

    mesh = build_unit_square(8)
    est = zz_estimate(mesh, None, full_values=mesh.interpolate_full(lambda x, y: x ** 2))
    marked = dorfler_mark(est, 0.5)
    print(f"eta = {est.total:.4e}, marked {len(marked)} of {len(est)} triangles")
