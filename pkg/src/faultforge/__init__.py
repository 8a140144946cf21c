"""faultforge: a fault-injection framework over a simulated storage stack."""

__version__ = "0.1.0"
