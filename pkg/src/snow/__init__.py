"""Serverless multi-party WebRTC call topologies over a deterministic simulated network."""

__version__ = "0.1.0"
