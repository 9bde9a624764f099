"""Visually grounded cross-lingual pretraining and multimodal MT, desk scale."""

__version__ = "0.1.0"

# Stable build identifier embedded in every artifact. Artifacts produced
# with equal configs and seeds must be byte-identical, so this is a
# constant, not a timestamp.
BUILD_ID = f"vtlm-{__version__}"
