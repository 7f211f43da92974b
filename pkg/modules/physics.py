"""
Module 7: Physical Scaling
Maps the dimensional condensate (particle mass m, scattering length a, particle
number N, harmonic trap frequencies) onto the dimensionless problem
-Delta u + W u + zeta |u|^2 u = lambda u and converts eigenvalues back to
chemical potentials.
"""

import os
import sys
from typing import Sequence, Tuple

import numpy as np

sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from modules.assembly import ProblemSpec
from modules.mesh import UNIT_SQUARE
from utils.errors import ConfigError


def _check_mass(mass: float):
    if not np.isfinite(mass) or mass <= 0.0:
        raise ConfigError("mass", f"particle mass must be positive, got {mass}")


def nondimensionalize(
    mass: float,
    scattering_length: float,
    n_atoms: float,
    trap_frequencies: Sequence[float],
    hbar: float = 1.0,
    domain: str = UNIT_SQUARE
) -> Tuple[ProblemSpec, float]:
    """
    Scale the dimensional GPE by 2m / hbar^2.

    The trap W~ = m/2 sum omega_i^2 x_i^2 becomes W = sum gamma_i x_i^2 with
    gamma_i = (m omega_i / hbar)^2 and the interaction becomes zeta = 8 pi a N.

    Args:
        mass: Particle mass m > 0
        scattering_length: s-wave scattering length a >= 0
        n_atoms: Particle number N >= 1
        trap_frequencies: One angular frequency per dimension
        hbar: Reduced Planck constant in the chosen units
        domain: Domain tag of the resulting ProblemSpec

    Returns:
        (ProblemSpec, hbar^2 / (2m)) where the factor maps lambda to mu
    """
    _check_mass(mass)
    if n_atoms < 1:
        raise ConfigError("n_atoms", f"particle number must be >= 1, got {n_atoms}")
    if not hbar > 0.0:
        raise ConfigError("hbar", f"must be positive, got {hbar}")
    omegas = np.asarray(trap_frequencies, dtype=float)
    if omegas.shape != (2,) or np.any(omegas <= 0.0):
        raise ConfigError("trap_frequencies", f"two positive frequencies required, got {list(trap_frequencies)}")
    gamma = tuple(float(g) for g in (mass * omegas / hbar) ** 2)
    zeta = 8.0 * np.pi * scattering_length * n_atoms
    spec = ProblemSpec(domain=domain, gamma=gamma, zeta=float(zeta))
    return spec, hbar ** 2 / (2.0 * mass)


def lambda_to_mu(lam: float, mass: float, hbar: float = 1.0) -> float:
    _check_mass(mass)
    return lam * hbar ** 2 / (2.0 * mass)


def mu_to_lambda(mu: float, mass: float, hbar: float = 1.0) -> float:
    _check_mass(mass)
    return mu * 2.0 * mass / hbar ** 2


# Test
if __name__ == "__main__":
    spec, factor = nondimensionalize(1.0, 1.0 / (8.0 * np.pi), 1, (np.sqrt(2.0), np.sqrt(2.0)))
    print(f"zeta = {spec.zeta:.6f}, gamma = {spec.gamma}, mu/lambda = {factor}")
