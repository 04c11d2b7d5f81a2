"""Person re-identification on synthetic data with a small multimodal LM:
continuation-style instruction tuning, latent identity supervision, and a
numpy reverse-mode autodiff engine underneath."""

__version__ = "0.1.0"
