"""Normal estimation tools"""

from typing import Optional

from fastmcp import Context

from config import PS_THREADS
from rmaff_ps.dataset_io import parse_image_subset
from rmaff_ps.pipeline import solve_dataset
from rmaff_ps.settings import load_config


def solve_summary(dataset_dir: str, out: str, method: str, checkpoint: Optional[str], images: Optional[str], config_path: Optional[str]):
    normals, seconds = solve_dataset(
        dataset_dir, out, method, checkpoint, parse_image_subset(images), load_config(config_path), PS_THREADS
    )
    return {
        "out": out,
        "method": method,
        "width": normals.width,
        "height": normals.height,
        "pixels": int(normals.mask.sum()),
        "seconds": round(seconds, 3),
    }


def register_solve_tools(mcp, toolkit_call):
    """Register normal-estimation tools"""

    @mcp.tool()
    async def solve_normals(
        dataset_dir: str,
        out: str,
        method: str = "l2",
        checkpoint: Optional[str] = None,
        images: Optional[str] = None,
        config_path: Optional[str] = None,
        ctx: Context = None,
    ):
        """
        Estimate a surface normal map for a dataset directory.

        method is "l2" (calibrated least squares) or "rmaff" (the trained
        network; checkpoint must point at a checkpoint or a training output
        directory). images selects a subset such as "20:96". The map is
        written to out as a 16-bit PNG or a PFM file.
        """
        if ctx:
            await ctx.info("Solving {} with {}...".format(dataset_dir, method))
        return await toolkit_call(solve_summary, dataset_dir, out, method, checkpoint, images, config_path, ctx=ctx)
