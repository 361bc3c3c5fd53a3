"""Multi-reference image generation at desk scale: packing, flow-matching SFT and group-relative RL."""

__version__ = "0.1.0"
