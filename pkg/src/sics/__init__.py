"""Label-matching service-chain outsourcing: gateway composition, equivalence
classes, and a simulated label-only cloud."""

from .bdd import FALSE, TRUE, BddEngine, Predicate
from .header import FIVE_TUPLE, Header, HeaderLayout, MatchSpec, pack, unpack

__version__ = "0.1.0"

__all__ = ["FALSE", "TRUE", "BddEngine", "Predicate", "FIVE_TUPLE", "Header",
           "HeaderLayout", "MatchSpec", "pack", "unpack"]
