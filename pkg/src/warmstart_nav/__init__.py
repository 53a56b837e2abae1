"""Policy-warm-started sampling MPC over a learned latent world model, at desk scale."""

__version__ = "0.1.0"
