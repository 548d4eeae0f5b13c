"""Episodic-future-thinking lab: multi-character policy, character inference and foresight on a ring road."""

__version__ = "0.1.0"
