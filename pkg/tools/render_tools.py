"""Synthetic dataset rendering tools"""

from typing import Optional

from fastmcp import Context

from config import PS_DATA_DIR, PS_THREADS
from rmaff_ps.pipeline import render_to_dir
from rmaff_ps.settings import load_config


def render_summary(config_path: Optional[str], out_dir: str):
    dirs = render_to_dir(load_config(config_path), out_dir, PS_THREADS)
    return {"out_dir": out_dir, "scenes": [d.name for d in dirs]}


def register_render_tools(mcp, toolkit_call):
    """Register rendering tools"""

    @mcp.tool()
    async def render_scenes(out_dir: str = PS_DATA_DIR, config_path: Optional[str] = None, ctx: Context = None):
        """
        Render synthetic photometric stereo scenes into dataset directories.

        Each scene directory holds lights.txt, mask.png, img_###.png and
        normal_gt.pfm. Without a config file the built-in defaults are used
        (random blobby scenes under hemisphere lights).
        """
        if ctx:
            await ctx.info("Rendering scenes into {}...".format(out_dir))
        return await toolkit_call(render_summary, config_path, out_dir, ctx=ctx)
