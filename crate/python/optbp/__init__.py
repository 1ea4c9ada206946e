from ._optbp import *  # noqa: F401,F403
from ._optbp import __all__  # noqa: F401
