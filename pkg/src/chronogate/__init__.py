"""Delayed-DNS filtering forwarder and DGA rendezvous lab."""

__version__ = "0.1.0"
