"""Quantum Monte Carlo for the 3D homogeneous electron gas.

Variational Monte Carlo with a message-passing neural backflow wavefunction,
Ewald summation for the periodic Coulomb interaction, stochastic
reconfiguration optimization, pair-correlation / structure-factor
observables, and fixed-node diffusion Monte Carlo.
"""

import jax

# Everything downstream assumes double precision: determinant ratios,
# finite-difference checks, and Ewald tails all need it.
jax.config.update("jax_enable_x64", True)

__version__ = "0.1.0"
