"""gazevlm: desk-scale gaze-supervised vision-language training pipeline.

Converts time-ordered eye-tracking sessions into per-token patch-index
supervision, trains a small autoregressive multimodal backbone whose four
reserved gaze tokens learn those targets (stage 1), then trains a
14-label classifier jointly with language modeling (stage 2), and
evaluates order-preserving vs. order-destroying supervision variants.
"""

__version__ = "0.1.0"
