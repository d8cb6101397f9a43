# -*- coding: UTF-8 -*-
"""
Photometric stereo toolkit
Synthetic scene rendering, least-squares and RMAFF-PSN normal estimation,
and angular-error evaluation
"""

import logging

__version__ = "0.1.0"

# Library modules log through child loggers; the CLI and the MCP server attach handlers
logging.getLogger(__name__).addHandler(logging.NullHandler())
