"""produb: two-stage prosody-adapted dubbing, desk scale.

Stage I pre-trains an acoustic system (text encoder, style encoder,
decoder) on a prosody-enhanced synthetic text-speech corpus. Stage II
freezes it and adapts prosody to video-derived emotion and lip features
through prosodic text/style encoders, in-domain emotion analysis,
cross-attention fusion, and diffusion-sampled prosodic style.
"""

__version__ = "0.1.0"
