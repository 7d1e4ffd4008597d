import os
from pathlib import Path

# MNIST lives under ./data unless BLA_DATA_DIR says otherwise
_LOCAL = Path(__file__).resolve().parent.parent / "data"
if "BLA_DATA_DIR" not in os.environ and _LOCAL.exists():
    os.environ["BLA_DATA_DIR"] = str(_LOCAL)
