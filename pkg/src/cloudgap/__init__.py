"""Cloud-gap imputation for multi-temporal multispectral chips: a masked-autoencoder
ViT, a conditional GAN baseline, E1/E2 masking protocols and evaluation harness."""

__version__ = "0.1.0"
