"""Two-phase persistence detection over endpoint audit logs."""

__version__ = "0.1.0"
