"""
Environment-driven defaults.

Values are read from the process environment after loading an optional
``.env`` file. CLI flags and config-file fields take precedence over these.
"""

import os
from pathlib import Path
from typing import Optional

from dotenv import load_dotenv

# Load environment variables
load_dotenv()

DEFAULT_OUTPUT_DIR = os.getenv("CLTESTBED_OUTPUT_DIR", "output")
DEFAULT_WORKERS = int(os.getenv("CLTESTBED_WORKERS", "1"))
LOG_LEVEL = os.getenv("CLTESTBED_LOG_LEVEL", "INFO")

MNIST_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}

HYPERPARAMS_GRID = Path(os.getenv(
    "CLTESTBED_GRID", Path(__file__).resolve().parent.parent / "configs" / "hyperparams.json"
))


def mnist_dir() -> Optional[Path]:
    """
    Directory holding the four MNIST IDX files, if configured and complete.

    Returns:
        Path to the directory, or None when ``CLTESTBED_MNIST_DIR`` is unset
        or any of the files is missing.
    """
    raw = os.getenv("CLTESTBED_MNIST_DIR")
    if not raw:
        return None
    directory = Path(raw)
    if not all((directory / name).exists() for name in MNIST_FILES.values()):
        return None
    return directory
