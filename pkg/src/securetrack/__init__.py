"""EKF tracking of a mobile node from RSS with malicious-anchor detection."""

from __future__ import annotations

__version__ = "0.1.0"
