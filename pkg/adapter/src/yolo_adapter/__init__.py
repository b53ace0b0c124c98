"""Reference detector backend for the survkit stdio JSON protocol.

Serves a detection model as a long-running child process: one capabilities
line, then one response line per request (see PROTOCOL.md at the repo
root). Three model kinds are supported: canned stub detections (protocol
testing), a threshold/connected-components blob detector (pixel-real
end-to-end runs without weights), and TorchScript exports of detection
models.
"""

__version__ = "0.1.0"

PROTOCOL_VERSION = 1

from .config import AdapterConfig  # noqa: F401
from .models import load_model  # noqa: F401
from .server import serve  # noqa: F401
from .selfcheck import run_selfcheck  # noqa: F401
