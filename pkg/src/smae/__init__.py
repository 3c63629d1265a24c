"""Surface masked autoencoders: icosphere patching, a small autodiff engine, SiT models and SSL pretraining."""

__version__ = "0.1.0"
