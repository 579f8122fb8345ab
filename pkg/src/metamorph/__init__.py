"""Design of bistable hinged-bar linkages with embedded springs."""

__version__ = "0.1.0"
