"""Variational Schur conditional sampling with residual normalizing flows."""
from .errors import *  # noqa: F401,F403
from .precision import default_trunc_tol, precision_name, working_dtype  # noqa: F401
from .linalg import *  # noqa: F401,F403
from .flows import *  # noqa: F401,F403
from .partition import *  # noqa: F401,F403
from .solvers import *  # noqa: F401,F403
from .lad import *  # noqa: F401,F403
from .posterior import *  # noqa: F401,F403
from .conditioning import *  # noqa: F401,F403
from .amortized import *  # noqa: F401,F403
from .datasets import *  # noqa: F401,F403
from .oracles import *  # noqa: F401,F403
from .training import *  # noqa: F401,F403
from .checks import *  # noqa: F401,F403
from .config import *  # noqa: F401,F403

__version__ = "0.1.0"
