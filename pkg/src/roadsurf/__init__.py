"""Road-surface reconstruction with planar Gaussian surfels."""

import os
import warnings

# the bundled TBB is too old for numba; fall back quietly to the other layers
os.environ.setdefault("NUMBA_THREADING_LAYER", "omp")
warnings.filterwarnings("ignore", message="The TBB threading layer", module="numba")

__version__ = "0.1.0"
