import os
from dotenv import load_dotenv

# Load environment variables from .env file
load_dotenv()

LOG_LEVEL = os.getenv("VERTEXDET_LOG_LEVEL", "INFO").upper()

# --threads default for data-parallel evaluation; training stays serial
DEFAULT_THREADS = int(os.getenv("VERTEXDET_THREADS", "1"))

DATA_DIR = os.getenv("VERTEXDET_DATA_DIR", "data")
RUNS_DIR = os.getenv("VERTEXDET_RUNS_DIR", "runs")

DEFAULT_SEED = int(os.getenv("VERTEXDET_SEED", "0"))

# Monte-Carlo sample count used by the geometry check suite
MC_SAMPLES = int(os.getenv("VERTEXDET_MC_SAMPLES", "1000000"))

# Finite stand-in for -inf in the box-mask bias
MASK_NEG = float(os.getenv("VERTEXDET_MASK_NEG", "-1e4"))
