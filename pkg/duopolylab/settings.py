# duopolylab/settings.py
from pathlib import Path
import os
from dotenv import load_dotenv

BASE_DIR = Path(__file__).resolve().parent.parent

# --------------------------------------------------
# Load environment variables
# --------------------------------------------------

# Local development .env
LOCAL_ENV = BASE_DIR / ".env"

# Shared secrets file on experiment hosts
HOST_ENV = Path("/var/www/secrets/.env")

if HOST_ENV.exists():
    load_dotenv(HOST_ENV)
elif LOCAL_ENV.exists():
    load_dotenv(LOCAL_ENV)

# --------------------------------------------------
# Core
# --------------------------------------------------

SECRET_KEY = os.getenv("SECRET_KEY", "unsafe-secret-key-change-me")

DEBUG = os.getenv("DJANGO_DEBUG", "False").lower() == "true"

# --------------------------------------------------
# Applications
# --------------------------------------------------

INSTALLED_APPS = [
    "economics",
    "simulation",
]

# Runs are files on disk; nothing is stored in a database.
DATABASES = {}

USE_TZ = True
TIME_ZONE = "UTC"

# --------------------------------------------------
# Runs
# --------------------------------------------------

DUOPOLY_RUNS_ROOT = Path(os.getenv("DUOPOLY_RUNS_ROOT", BASE_DIR / "runs"))

DUOPOLY_PRESETS_DIR = BASE_DIR / "simulation" / "presets"

# Rounds after which the stopping rule gives up on stationarity.
DUOPOLY_HARD_CAP = int(os.getenv("DUOPOLY_HARD_CAP", "2000"))

# --------------------------------------------------
# LLM provider
# --------------------------------------------------

LLM_API_BASE = os.getenv("LLM_API_BASE", "https://api.openai.com/v1")

LLM_API_KEY_ENV = os.getenv("LLM_API_KEY_ENV", "OPENAI_API_KEY")

LLM_DEFAULT_MODEL = os.getenv("LLM_DEFAULT_MODEL", "gpt-4-0314")

LLM_TIMEOUT_SECONDS = float(os.getenv("LLM_TIMEOUT_SECONDS", "60"))

LLM_MAX_ATTEMPTS = int(os.getenv("LLM_MAX_ATTEMPTS", "3"))

LLM_BACKOFF_FACTOR = float(os.getenv("LLM_BACKOFF_FACTOR", "1.0"))

# GPT-4's 8192-token window is roughly 6000 English words.
PROMPT_WORD_BUDGET = int(os.getenv("PROMPT_WORD_BUDGET", "6000"))

# --------------------------------------------------
# Logging
# --------------------------------------------------

LOGGING = {
    "version": 1,
    "disable_existing_loggers": False,
    "formatters": {
        "plain": {"format": "%(asctime)s %(levelname)s %(name)s %(message)s"},
    },
    "handlers": {
        "console": {"class": "logging.StreamHandler", "formatter": "plain"},
    },
    "loggers": {
        "economics": {"handlers": ["console"], "level": os.getenv("DUOPOLY_LOG_LEVEL", "INFO")},
        "simulation": {"handlers": ["console"], "level": os.getenv("DUOPOLY_LOG_LEVEL", "INFO")},
    },
}
