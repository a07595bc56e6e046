"""File formats: PLY scenes, PNG images, checkpoints, feature files, CSV."""

from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .features import FeatureFileError, load_feature_file, save_feature_file
from .metrics_csv import CsvWriter, read_csv, write_csv
from .ply import MissingPropertyError, PlyError, load_ply, save_ply
from .png import ImageFormatError, load_png, save_png

__all__ = [
    "Checkpoint", "CheckpointError", "load_checkpoint", "save_checkpoint",
    "FeatureFileError", "load_feature_file", "save_feature_file",
    "CsvWriter", "read_csv", "write_csv",
    "MissingPropertyError", "PlyError", "load_ply", "save_ply",
    "ImageFormatError", "load_png", "save_png",
]
