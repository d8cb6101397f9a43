"""Status and configuration tools"""

from fastmcp import Context

import config
import rmaff_ps
from rmaff_ps.settings import VARIANTS, config_schema


def toolkit_status():
    return {
        "status": "active",
        "version": rmaff_ps.__version__,
        "seed": config.PS_SEED,
        "precision": config.PS_PRECISION,
        "threads": config.PS_THREADS,
        "deterministic": config.PS_DETERMINISTIC,
        "data_dir": config.PS_DATA_DIR,
        "variants": list(VARIANTS),
        "methods": ["l2", "rmaff"],
    }


def register_status_tools(mcp, toolkit_call):
    """Register status-related tools"""

    @mcp.tool()
    async def get_toolkit_status(ctx: Context = None):
        """Check that the photometric stereo toolkit is loaded and report its environment settings"""
        return await toolkit_call(toolkit_status, ctx=ctx)

    @mcp.tool()
    async def get_config_schema(ctx: Context = None):
        """JSON Schema of the toolkit configuration document (render, network, train and l2 sections)"""
        return await toolkit_call(config_schema, ctx=ctx)
