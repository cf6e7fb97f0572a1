from importlib.metadata import PackageNotFoundError, version

try:
    # Change here if project is renamed and does not equal the package name
    dist_name = "sacfl"
    __version__ = version(dist_name)
except PackageNotFoundError:  # pragma: no cover
    __version__ = "unknown"
finally:
    del version, PackageNotFoundError

from . import client, config, data_gen, errors, nn_core, orchestrator, server

# import everything and rely on __ALL__
from .client import *  # noqa
from .config import *  # noqa
from .data_gen import *  # noqa
from .errors import *  # noqa
from .nn_core import *  # noqa
from .orchestrator import *  # noqa
from .server import *  # noqa

__all__ = list(
    set(
        client.__all__
        + config.__all__
        + data_gen.__all__
        + errors.__all__
        + nn_core.__all__
        + orchestrator.__all__
        + server.__all__
    )
)
