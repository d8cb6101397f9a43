"""Tool registration system for the Photometric Stereo MCP Server"""


def register_tools(mcp_server, toolkit_call):
    """Register all tools with the MCP server"""
    # Import all tool modules
    from .status_tools import register_status_tools
    from .render_tools import register_render_tools
    from .solve_tools import register_solve_tools
    from .eval_tools import register_eval_tools
    from .train_tools import register_train_tools

    # Register tools from each module
    register_status_tools(mcp_server, toolkit_call)
    register_render_tools(mcp_server, toolkit_call)
    register_solve_tools(mcp_server, toolkit_call)
    register_eval_tools(mcp_server, toolkit_call)
    register_train_tools(mcp_server, toolkit_call)
