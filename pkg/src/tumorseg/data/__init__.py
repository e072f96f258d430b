from .dataset import (
    dataset_splits,
    load_subject,
    manifest_volumes,
    phantom_volumes,
    read_nifti_subject,
    synthesize,
    volumes_to_slices,
)
from .nifti import NiftiError, read_nifti1, write_nifti1
from .phantom import PhantomSpec, Volume, generate_phantom, minmax_normalize
from .slices import SliceSample, batch_arrays, extract_slices
from .store import DatasetManifest, ManifestEntry, read_volume, split_dataset, write_volume

__all__ = [
    "DatasetManifest",
    "ManifestEntry",
    "NiftiError",
    "PhantomSpec",
    "SliceSample",
    "Volume",
    "batch_arrays",
    "dataset_splits",
    "load_subject",
    "manifest_volumes",
    "phantom_volumes",
    "read_nifti_subject",
    "synthesize",
    "volumes_to_slices",
    "extract_slices",
    "generate_phantom",
    "minmax_normalize",
    "read_nifti1",
    "read_volume",
    "split_dataset",
    "write_nifti1",
    "write_volume",
]
