import os
from dotenv import load_dotenv

load_dotenv()

LOG_LEVEL = os.getenv("LAVER_LOG_LEVEL", "INFO").upper()
OUT_DIR = os.getenv("LAVER_OUT_DIR", "runs").strip()

# Deterministic mode pins torch to one thread and disables batch prefetch.
DETERMINISTIC = os.getenv("LAVER_DETERMINISTIC", "1").strip().lower() in ("1", "true", "yes")
NUM_THREADS = int(os.getenv("LAVER_NUM_THREADS", "1"))
PREFETCH_WORKERS = int(os.getenv("LAVER_PREFETCH_WORKERS", "0"))
QUEUE_SIZE = int(os.getenv("LAVER_QUEUE_SIZE", "4"))

RUN_SLOW = os.getenv("LAVER_RUN_SLOW", "0").strip().lower() in ("1", "true", "yes")
