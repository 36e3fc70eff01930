"""
Defines all the types used in the module
"""

from pathlib import Path
from typing import Callable, Sequence, Union

import numpy as np

PathLike = Union[Path, str]
ShapeLike = Sequence[int]
FieldFunction = Callable[[np.ndarray], np.ndarray]
