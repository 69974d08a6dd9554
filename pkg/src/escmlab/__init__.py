"""Desk-scale lab for counterfactual post-click conversion-rate estimation."""

__version__ = "0.1.0"

from .errors import EscmError  # noqa: E402,F401
