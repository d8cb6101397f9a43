import os
from dotenv import load_dotenv

# Load environment variables from .env file if present
load_dotenv()

# Root seed for every random stream (scenes, noise, weight init, batches)
PS_SEED: int = int(os.getenv("PS_SEED", 0))

# Numeric precision for network work: "f32" for training, "f64" for oracle checks
PS_PRECISION: str = os.getenv("PS_PRECISION", "f32")

# Worker threads for per-scene / per-pixel parallel sections
PS_THREADS: int = int(os.getenv("PS_THREADS", 1))

# Logging level for the CLI and the MCP server
PS_LOG_LEVEL: str = os.getenv("PS_LOG_LEVEL", "INFO")

# Determinism mode: serial execution, wall-clock fields written as zero
PS_DETERMINISTIC: bool = os.getenv("PS_DETERMINISTIC", "0").lower() in ("1", "true", "yes")

# Default location for rendered datasets and checkpoints
PS_DATA_DIR: str = os.getenv("PS_DATA_DIR", "./data")
