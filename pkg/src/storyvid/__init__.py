"""storyvid: a desk-scale customized storytelling-video pipeline.

Multi-agent story -> storyboard -> animation workflow around a toy latent
video-diffusion model customized via low-rank adapters plus block-wise
subject-token embeddings with an attention localization loss.
"""

__version__ = "0.1.0"
