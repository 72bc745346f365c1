"""Exception types raised by boltzkit operations.

Every failure mode that callers are expected to catch gets its own class;
all inherit from :class:`BoltzkitError` so ``except BoltzkitError`` works
as a catch-all at CLI boundaries.
"""

from __future__ import annotations


class BoltzkitError(Exception):
    """Base class for all boltzkit-specific errors."""


class NonPositiveA0(BoltzkitError):
    """Angular kernel integrates to a non-positive total mass."""


class ZeroMass(BoltzkitError):
    """Measure has zero (or numerically vanishing) total mass."""


class DiracTemperature(BoltzkitError):
    """Measure is concentrated at a point: temperature is zero."""


class UnsupportedScheme(BoltzkitError):
    """Requested distance scheme / norm order is not available."""


class MomentHypothesisViolated(BoltzkitError):
    """Input measure fails the finiteness hypotheses of the operator."""


class InadmissibleExponent(BoltzkitError):
    """Requested Lebesgue exponent lies outside the admissible window."""


class CoincidentPair(BoltzkitError):
    """Kernel evaluation requested at a coincident velocity pair."""


class MajorantViolated(BoltzkitError):
    """A sampled collision rate exceeded the precomputed majorant."""


class DomainOverflow(BoltzkitError):
    """Grid operation lost more mass off-domain than the tolerance allows."""


class InsufficientTemporalResolution(BoltzkitError):
    """Decomposition requested with too few time steps to resolve."""


class KernelDimensionMismatch(BoltzkitError):
    """Linearized operator kernel dimension differs from the conserved count."""


class InvalidD0(BoltzkitError):
    """Initial distance argument lies outside the reachable range."""


class EmptyWindow(BoltzkitError):
    """Fit window contains no usable samples."""


class ConfigInvalid(BoltzkitError):
    """Run configuration failed validation."""
