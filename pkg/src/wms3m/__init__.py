"""Action-conditioned multi-scale state-space world model for radio KPI traces."""

__version__ = "0.1.0"
