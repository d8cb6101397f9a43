import logging
from functools import partial
from typing import Any, Callable, Dict, Union

import anyio
from fastmcp import Context, FastMCP
from pydantic import ValidationError

# Load configuration variables
from config import PS_LOG_LEVEL

from rmaff_ps.errors import InputError, PhotometricStereoError

logging.basicConfig(level=PS_LOG_LEVEL.upper())
logger = logging.getLogger(__name__)

# Create an MCP server exposing the photometric stereo toolkit
mcp = FastMCP("Photometric Stereo MCP Server")


async def toolkit_call(func: Callable[..., Dict[str, Any]], *args, ctx: Context = None, **kwargs) -> Union[Dict, str]:
    """Run a blocking toolkit job on a worker thread; errors come back as an "Error: ..." string"""
    try:
        return await anyio.to_thread.run_sync(partial(func, *args, **kwargs))
    except (InputError, ValidationError) as e:
        error_msg = f"Error: invalid input: {e}"
    except PhotometricStereoError as e:
        error_msg = f"Error: {e}"
    except Exception as e:
        logger.exception("Toolkit call %s failed", getattr(func, "__name__", func))
        error_msg = f"Error: {e}"
    if ctx:
        await ctx.error(error_msg)
    return error_msg


# Register all tools BEFORE the main block
from tools import register_tools

register_tools(mcp, toolkit_call)

if __name__ == "__main__":
    mcp.run()
