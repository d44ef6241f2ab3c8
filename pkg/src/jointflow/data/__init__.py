"""Procedural assembly datasets."""
from .archive import SampleArchive, write_archive
from .fracture import Fragment, fracture
from .sample import (
    AssemblySample,
    DataConfig,
    build_sample,
    drop_parts,
    generate_samples,
    randomize_poses,
    sample_rng,
)
from .shapes import Shape, TriMesh, make_shape

__all__ = [
    "AssemblySample",
    "DataConfig",
    "Fragment",
    "SampleArchive",
    "Shape",
    "TriMesh",
    "build_sample",
    "drop_parts",
    "fracture",
    "generate_samples",
    "make_shape",
    "randomize_poses",
    "sample_rng",
    "write_archive",
]
