from pydantic_settings import BaseSettings, SettingsConfigDict
from typing import Optional
from dotenv import load_dotenv
from pathlib import Path

# Load environment variables from the project .env first, then the working directory
env_path = Path(__file__).parent.parent.parent / ".env"
load_dotenv(dotenv_path=env_path)

fallback_env = Path(".env")
load_dotenv(dotenv_path=fallback_env, override=False)


class Settings(BaseSettings):
    # Project
    PROJECT_NAME: str = "Graph-S4 Normative Screening"

    # Logging Configuration
    LOG_LEVEL: str = "INFO"
    LOG_FILE: Optional[str] = None
    LOG_JSON: bool = False

    # Compute Configuration
    NUM_THREADS: int = 4
    DETERMINISTIC: bool = True

    # Run Layout
    DEFAULT_CONFIG_PATH: str = str(Path(__file__).parent.parent.parent / "configs" / "default.json")
    LOCK_FILENAME: str = ".gs4.lock"

    model_config = SettingsConfigDict(
        env_file=".env",
        env_prefix="GS4_",
        case_sensitive=True,
        extra="ignore",
    )


settings = Settings()
