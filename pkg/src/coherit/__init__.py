"""Heritability and coheritability estimation for family cohorts.

Moment-based estimation of variance components, heritability, and genetic
correlation for continuous, binary, and mixed phenotype pairs observed on
nuclear families, with liability-threshold handling of binary traits,
inverse-probability family weights, parametric-bootstrap inference, and a
simulation harness.
"""

__version__ = "0.1.0"
