"""Helpers that drive the CLI end to end on small configurations."""

import hashlib
from pathlib import Path

from cogadapt.cli import main

TINY_CONFIG = """\
seed: 3
synth:
  n_subjects: 3
  minutes_per_subject: 1.0
  fs: 100.0
windowing:
  target_fs: 100.0
augment:
  max_shift_samples: 10
model:
  n_layers: 2
  d_model: 8
  stride: 5
  head_hidden: 16
  adapter_hidden: 16
pretrain:
  epochs: 3
  batch: 4
  grad_accum: 2
  lr: 3.0e-3
  min_epochs: 1
train:
  split: loso
  k: 3
  scenario_overrides:
    A: {epochs: 2, batch: 16, lr_head: 1.0e-3, lr_adapter: 3.0e-4}
    B: {epochs: 2, batch: 16, lr_head: 1.0e-3, lr_adapter: 3.0e-4, lr_encoder_top: 1.0e-4}
    C: {epochs: 2, batch: 16, lr_head: 1.0e-3, lr_adapter: 3.0e-4, lr_encoder_top: 1.0e-4,
        lr_encoder_mid: 3.0e-5, lr_encoder_bottom: 1.0e-5}
"""


def cli(*args) -> int:
    return main([str(a) for a in args])


def run_pipeline(root: Path, config: Path, scenarios=("A",), splits=("loso",)) -> dict[str, Path]:
    """synth -> preprocess -> pretrain-adapter -> reconstruct-eval -> train -> report."""
    d = {name: root / name for name in ("synth", "win", "adapter", "recon")}
    assert cli("synth", "--config", config, "--out", d["synth"]) == 0
    assert cli("preprocess", "--config", config, "--data", d["synth"], "--out", d["win"]) == 0
    assert cli("pretrain-adapter", "--config", config, "--data", d["synth"], "--out", d["adapter"]) == 0
    assert cli("reconstruct-eval", "--config", config, "--data", d["synth"],
               "--adapter", d["adapter"] / "adapter.cgak", "--out", d["recon"]) == 0
    for scen in scenarios:
        for split in splits:
            key = f"train_{scen}_{split}"
            d[key] = root / "runs" / key
            assert cli("train", "--config", config, "--data", d["win"], "--scenario", scen,
                       "--split", split, "--adapter", d["adapter"] / "adapter.cgak",
                       "--out", d[key]) == 0
    assert cli("report", root / "runs") == 0
    return d


def tree_digest(path: Path) -> dict[str, str]:
    """sha256 of every file below ``path`` keyed by relative path."""
    return {str(p.relative_to(path)): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(Path(path).rglob("*")) if p.is_file()}
