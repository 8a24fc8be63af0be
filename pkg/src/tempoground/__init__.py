"""Predictive temporal perception, evidence-pool construction, and
evidence-cited span grounding over synthetic feature sequences."""

__version__ = "0.1.0"
