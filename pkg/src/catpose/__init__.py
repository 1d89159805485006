"""Category-level 6D pose estimation from depth images with a one-class Hough forest.

Training parts carry skeleton features (link angles and node offsets) that
only steer split selection; the trained forest and the inference path see
depth patches alone.
"""

from .config import PipelineConfig
from .errors import CatposeError, InputError

__version__ = "0.1.0"
__all__ = ["PipelineConfig", "CatposeError", "InputError", "__version__"]
