"""
ARFlow at desk scale: flow matching over noise-ordered image sequences with hybrid chunkwise linear attention.
"""
__version__ = "0.1.0"
