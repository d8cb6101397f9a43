"""Training tools"""

from typing import Optional

from fastmcp import Context

from config import PS_DETERMINISTIC
from rmaff_ps.pipeline import train_from_dir
from rmaff_ps.settings import load_config


def train_summary(config_path: Optional[str], train_dir: str, out_dir: str, epochs: Optional[int]):
    cfg = load_config(config_path)
    if epochs is not None:
        cfg = cfg.model_copy(update={"train": cfg.train.model_copy(update={"epochs": epochs})})
    best = train_from_dir(cfg, train_dir, out_dir, deterministic=PS_DETERMINISTIC)
    return {"out_dir": out_dir, "best_epoch": best.epoch, "val_mae": best.val_mae}


def register_train_tools(mcp, toolkit_call):
    """Register training tools"""

    @mcp.tool()
    async def train_network(
        train_dir: str, out_dir: str, config_path: Optional[str] = None, epochs: Optional[int] = None, ctx: Context = None
    ):
        """
        Train RMAFF-PSN on the scene directories under train_dir.

        Checkpoints, train_log.tsv and a BEST pointer to the epoch with the
        lowest validation MAE are written to out_dir. This can take a long
        time for the default network size.
        """
        if ctx:
            await ctx.info("Training on {}...".format(train_dir))
        return await toolkit_call(train_summary, config_path, train_dir, out_dir, epochs, ctx=ctx)
