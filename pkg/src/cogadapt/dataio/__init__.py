from .csvio import emit_csv, ingest_csv
from .formats import (
    Manifest,
    ManifestEntry,
    decode_checkpoint,
    decode_window,
    encode_checkpoint,
    encode_window,
    load_checkpoint_into,
    read_checkpoint,
    read_manifest,
    read_window,
    write_checkpoint,
    write_manifest,
    write_window,
)
from .synth import (
    SubjectTruth,
    SynthConfig,
    SynthTruth,
    default_mixing,
    nearest_centroid_accuracy,
    synth_generate,
    window_rr_std,
)

__all__ = [
    "emit_csv", "ingest_csv", "Manifest", "ManifestEntry", "decode_checkpoint",
    "decode_window", "encode_checkpoint", "encode_window", "load_checkpoint_into",
    "read_checkpoint", "read_manifest", "read_window", "write_checkpoint",
    "write_manifest", "write_window", "SubjectTruth", "SynthConfig", "SynthTruth",
    "default_mixing", "nearest_centroid_accuracy", "synth_generate", "window_rr_std",
]
