"""Reference-image-guided stylization at desk scale: a two-branch latent
diffusion model (reference branch for style, structure guider for layout)
with self-supervised crop-pair training, strength control, a video path, and
an evaluation harness."""

__version__ = "0.1.0"
