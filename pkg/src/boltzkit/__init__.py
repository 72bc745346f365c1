"""boltzkit: measure-valued homogeneous Boltzmann toolkit.

Submodules
----------
kernel
    Collision kernel specification, angular normalization, sphere quadrature.
measures
    Particle (atomic) measures, moment norms, conserved quantities,
    normalization maps, Maxwellian references, distances.
collision
    Weak-form collision operators on particle measures and moment bounds.
dvm
    Velocity-grid densities, conservative grid collision operator,
    exponential-Euler evolution, gain/loss decomposition.
iterated_gain
    Pointwise iterated-gain kernel, its representation check, scaling probes.
dsmc
    Stochastic particle solver and Mehler interpolation sampling.
linearized
    Linearized collision operator near a Maxwellian and its spectral gap.
analysis
    Moment envelopes, relaxation bounds, stability moduli, fits, verdicts.
cli
    ``boltz`` command line entry points.
"""

from __future__ import annotations

__version__ = "0.1.0"

from . import errors

__all__ = ["errors", "__version__"]
