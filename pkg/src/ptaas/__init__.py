"""Privacy-enhanced training-as-a-service: device client and cloud trainer."""

__version__ = "0.1.0"
