"""Command-line front end, configuration, model archives, metrics and ablation."""
from .archive import ArchiveError, ChecksumError, ModelArchive, VersionError, load_model, save_model
from .config import ABLATION_CELLS, ConfigError, RunConfig, load_config
from .commands import main

__all__ = ["ABLATION_CELLS", "ArchiveError", "ChecksumError", "ConfigError", "ModelArchive", "RunConfig",
           "VersionError", "load_config", "load_model", "main", "save_model"]
