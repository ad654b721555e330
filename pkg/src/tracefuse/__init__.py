"""Image manipulation detection with trace features, fused attention decoding and a procedural tamper generator."""

__version__ = "0.1.0"
