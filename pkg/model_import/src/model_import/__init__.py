"""Checkpoint import tooling: HF-format weights to engine manifests, plus
independent fixtures for numerical cross-validation."""

from .convert import Manifest, convert_checkpoint, export_vocab
from .fixtures import export_fixtures, fixture_bytes, read_prompts_file, write_fixtures
from .reader import (
    SourceCheckpoint,
    SourceConfig,
    UnsupportedCheckpointError,
    checkpoint_digest,
    read_checkpoint,
    read_config,
)

__all__ = [
    "Manifest",
    "SourceCheckpoint",
    "SourceConfig",
    "UnsupportedCheckpointError",
    "checkpoint_digest",
    "convert_checkpoint",
    "export_fixtures",
    "export_vocab",
    "fixture_bytes",
    "read_checkpoint",
    "read_config",
    "read_prompts_file",
    "write_fixtures",
]
