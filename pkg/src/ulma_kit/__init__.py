"""ulma-kit: desk-scale bioacoustic analysis toolkit.

Decomposes animal vocalizations into ism/fil/harf components, computes
intention metrics (chirps distance, height ratio, ULM score), discovers
discrete acoustic units via two-stage k-means, trains a toy
masked-prediction encoder with fine-tuning heads, and trains a scalar
reward model from pairwise preferences.
"""

__version__ = "0.1.0"

__all__ = [
    "signal",
    "segmentation",
    "harf_synth",
    "units",
    "model",
    "reward",
    "cli",
    "errors",
]
