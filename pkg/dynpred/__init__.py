import os

from dynpred import logger

__version__ = '0.1.0'

logger.initialize(os.getenv('DYNPRED_LOG_FILE'))
