"""Counterexample-guided repair engine for Verus proofs."""

__version__ = "0.1.0"
