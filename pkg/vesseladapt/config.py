"""
Application Configuration
Process-wide settings read from the environment (prefix VESSELADAPT_) and .env
"""
import json
from functools import lru_cache
from pathlib import Path
from typing import Any, Dict, Optional, Union

from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    """Application settings with environment variable support"""

    model_config = SettingsConfigDict(
        env_file=".env",
        env_prefix="VESSELADAPT_",
        case_sensitive=False,
        extra="ignore",
    )

    # Application
    app_name: str = "Vessel Adaptation Service"
    app_version: str = "1.0.0"
    debug: bool = False
    environment: str = "production"

    # Server
    host: str = "0.0.0.0"
    port: int = 8000

    # Run registry
    database_url: str = "sqlite:///./vesseladapt.db"

    # Filesystem
    data_root: Path = Path("./data")
    runs_root: Path = Path("./runs")

    # Reproducibility: VESSELADAPT_SEED overrides the seed of every resolved run config
    seed: Optional[int] = None
    torch_threads: int = 1
    device: str = "cpu"

    # Logging
    log_level: str = "INFO"


@lru_cache()
def get_settings() -> Settings:
    """Get cached settings instance"""
    return Settings()


# ==================== Run configuration ====================

def load_train_config(path: Optional[Union[str, Path]] = None):
    """TrainConfig from a JSON file (defaults when `path` is None), seed overridden by VESSELADAPT_SEED"""
    from vesseladapt.schemas import TrainConfig

    raw: Dict[str, Any] = {}
    if path is not None:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    cfg = TrainConfig.model_validate(raw)
    seed = get_settings().seed
    if seed is not None:
        cfg = cfg.model_copy(update={"seed": seed})
    return cfg


def resolve_run_config(cfg, data_root: Union[str, Path]) -> Dict[str, Any]:
    """Self-describing record of a run: config, its hash, code version and data checksum"""
    from vesseladapt import __version__
    from vesseladapt.services.volume_io import dataset_checksum

    return {
        "config": cfg.model_dump(mode="json"),
        "config_hash": cfg.config_hash(),
        "code_version": __version__,
        "data_root": str(Path(data_root).resolve()),
        "data_checksum": dataset_checksum(data_root),
        "torch_threads": get_settings().torch_threads,
    }
