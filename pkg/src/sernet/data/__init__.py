from .io import (
    DatasetManifest,
    Palette,
    SegSample,
    iterate,
    load_manifest,
    load_palette,
    load_ppm_pgm,
    load_sample,
    read_netpbm,
    write_dataset,
    write_netpbm,
)
from .synth import synth_dataset, synth_scene

__all__ = [
    "DatasetManifest",
    "Palette",
    "SegSample",
    "iterate",
    "load_manifest",
    "load_palette",
    "load_ppm_pgm",
    "load_sample",
    "read_netpbm",
    "synth_dataset",
    "synth_scene",
    "write_dataset",
    "write_netpbm",
]
