"""Process-level settings read from the environment (and an optional .env file)."""

import os
from pathlib import Path
from typing import Optional

from dotenv import load_dotenv
from pydantic import BaseModel, Field

# repository .env first, then the working directory; real env vars always win
_REPO_ENV = Path(__file__).resolve().parents[2] / ".env"
if _REPO_ENV.exists():
    load_dotenv(_REPO_ENV)
else:
    load_dotenv()


class Settings(BaseModel):
    """Environment-derived knobs shared by every command."""
    threads: int = Field(default=1, ge=1)
    output_dir: str = "./output"
    log_level: str = "INFO"
    progress: bool = True

    @classmethod
    def from_env(cls) -> "Settings":
        return cls(
            threads=int(os.getenv("LWDNA_THREADS", "1")),
            output_dir=os.getenv("LWDNA_OUTPUT_DIR", "./output"),
            log_level=os.getenv("LWDNA_LOG_LEVEL", "INFO"),
            progress=os.getenv("LWDNA_PROGRESS", "true").lower() == "true",
        )


# Singleton instance
_settings_instance: Optional[Settings] = None


def get_settings() -> Settings:
    """Get singleton settings instance."""
    global _settings_instance
    if _settings_instance is None:
        _settings_instance = Settings.from_env()
    return _settings_instance


def reset_settings() -> None:
    """Drop the cached settings so the next call re-reads the environment."""
    global _settings_instance
    _settings_instance = None
