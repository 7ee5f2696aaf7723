"""Reference wire-protocol server for the prompt-robustness toolkit."""

__version__ = "0.1.0"

from .model import ServerInstance, build_instance, evaluate
from .server import ServerState, handle_line, serve_stdio, serve_tcp
