"""Planning toolkit for contact-rich planar manipulation with smoothed
quasi-dynamic contact models."""

__version__ = "0.1.0"
