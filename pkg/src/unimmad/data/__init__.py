from .manifest import SampleRecord, TaskManifest, load_manifest
from .sampler import ReplaySampler, WeightedSampler
from .synth import DEFAULT_MODALITIES, synth_dataset
from .umtf import read_umtf, write_umtf

__all__ = [
    "DEFAULT_MODALITIES",
    "ReplaySampler",
    "SampleRecord",
    "TaskManifest",
    "WeightedSampler",
    "load_manifest",
    "read_umtf",
    "synth_dataset",
    "write_umtf",
]
