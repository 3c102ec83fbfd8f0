"""Brain-tumor segmentation pipeline toolkit: preprocessing, a micro MedNeXt
engine, boundary-aware losses, ensembling, postprocessing and evaluation."""

from .volume import GridGeometry, LabelMap, ProbMaps, Volume, read_nifti, write_nifti

__all__ = ["GridGeometry", "LabelMap", "ProbMaps", "Volume", "read_nifti", "write_nifti"]
__version__ = "0.1.0"
