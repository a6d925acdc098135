"""Write IDX files from the 5000-image MNIST subset bundled with mlxtend.

Usage: python scripts/mnist_subset_to_idx.py OUT_DIR

Full MNIST IDX files, when available, should be preferred; point
FLOWMIX_DATA_DIR at their directory instead.
"""

import importlib.util
import sys
from pathlib import Path

from flowmix.datasets import idx_from_csv


def bundled_csv() -> Path:
    spec = importlib.util.find_spec("mlxtend")
    if spec is None or not spec.submodule_search_locations:
        raise SystemExit("mlxtend is not installed (pip install mlxtend --no-deps)")
    return Path(spec.submodule_search_locations[0]) / "data" / "data" / "mnist_5k.csv.gz"


if __name__ == "__main__":
    if len(sys.argv) != 2:
        raise SystemExit(__doc__)
    images, labels = idx_from_csv(bundled_csv(), sys.argv[1])
    print(images, labels)
