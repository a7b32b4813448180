try:
    from ._version import __version__
except ImportError:  # source checkout without a build step
    __version__ = "0.0.0+unknown"

import logging
logging.basicConfig()
logger = logging.getLogger(__name__)
