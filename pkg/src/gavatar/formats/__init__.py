"""Persistent file formats: checkpoints, template assets, poses, meshes, images.

Byte layouts are documented in docs/formats.md; everything binary is
little-endian.
"""
