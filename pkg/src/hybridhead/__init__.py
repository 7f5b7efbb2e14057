"""Hybrid mesh + Gaussian head avatars: skinned textured face, splatted hair, occlusion-aware compositing."""
__version__ = "0.1.0"
