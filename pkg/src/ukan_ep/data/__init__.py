from .augment import AugmentConfig, augment
from .nifti import NiftiError, NiftiHeader, read_nifti, write_nifti
from .phantom import MODALITIES, SampleVolume, generate_phantom, load_manifest_cases, write_phantom_dataset

__all__ = [
    "AugmentConfig",
    "augment",
    "NiftiError",
    "NiftiHeader",
    "read_nifti",
    "write_nifti",
    "MODALITIES",
    "SampleVolume",
    "generate_phantom",
    "load_manifest_cases",
    "write_phantom_dataset",
]
