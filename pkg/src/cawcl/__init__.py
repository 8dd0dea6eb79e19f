"""Camera-aligned, self-paced contrastive domain adaptation for video re-identification."""

__version__ = "0.1.0"
