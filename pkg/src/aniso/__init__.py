"""Neural anisotropy directions and underspecified-task diagnostics on a small numpy autodiff engine."""

from __future__ import annotations

__version__ = "0.1.0"
