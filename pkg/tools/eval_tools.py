"""Evaluation tools"""

from typing import Optional

from fastmcp import Context

from rmaff_ps.pipeline import evaluate_prediction


def eval_summary(pred: str, dataset_dir: str, out_dir: Optional[str], max_degrees: float):
    return evaluate_prediction(pred, dataset_dir, out_dir, max_degrees).summary()


def register_eval_tools(mcp, toolkit_call):
    """Register evaluation tools"""

    @mcp.tool()
    async def evaluate_normals(
        pred: str, dataset_dir: str, out_dir: Optional[str] = None, max_degrees: float = 90.0, ctx: Context = None
    ):
        """
        Mean angular error (degrees) of a predicted normal map against a
        dataset's ground truth, with 50/75/90th percentiles. When out_dir is
        given, report.tsv and error_map.png are written there.
        """
        return await toolkit_call(eval_summary, pred, dataset_dir, out_dir, max_degrees, ctx=ctx)
