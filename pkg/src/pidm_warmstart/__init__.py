"""Desk-scale PIDM warm-start for PPO policies on a planar two-link arm."""

__version__ = "0.1.0"
