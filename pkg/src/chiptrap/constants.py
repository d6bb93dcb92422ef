"""Physical constants used throughout, SI units.

Values are pinned rather than taken from scipy so that simulation output
is stable across library upgrades.
"""

import math

MU0 = 4e-7 * math.pi            # vacuum permeability, T m / A
MU_B = 9.274009994e-24          # Bohr magneton, J / T
K_B = 1.380649e-23              # Boltzmann constant, J / K
HBAR = 1.0545718e-34            # reduced Planck constant, J s
M_RB87 = 1.443160e-25           # mass of 87Rb, kg
GAMMA_RB = 2 * math.pi * 6.0666e6  # Rb D2 natural linewidth, rad/s (detuning unit)
G_EARTH = 9.81                  # gravitational acceleration, m / s^2

# Lande factors for the 87Rb 5S_1/2 hyperfine manifolds.
G_F = {1: -0.5, 2: 0.5}
