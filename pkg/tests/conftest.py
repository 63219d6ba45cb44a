import sys
from pathlib import Path

# Allow `from oracles import ...` inside the test modules.
sys.path.insert(0, str(Path(__file__).parent))
