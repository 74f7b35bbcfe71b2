"""Flux-space large deviations and generalised gradient structures.

Submodules:

- :mod:`fluxgrad.network`: reaction networks, mass-action kinetics,
  detailed-balance equilibria
- :mod:`fluxgrad.dynamics`: stochastic simulation, invariant measure,
  macroscopic ODEs on flux space
- :mod:`fluxgrad.ldp`: Hamiltonians, rate functions, Legendre transforms,
  contraction from fluxes to states
- :mod:`fluxgrad.structures`: free energies, dissipation potentials,
  GGS / pGGEN / GGEN checks
- :mod:`fluxgrad.lattice`: random walkers and unimolecular
  reaction-diffusion on a periodic grid
- :mod:`fluxgrad.cli`: the ``fluxgrad`` command
"""

from fluxgrad.network import Reaction, ReactionNetwork

__version__ = "0.1.0"

__all__ = ["Reaction", "ReactionNetwork", "__version__"]
