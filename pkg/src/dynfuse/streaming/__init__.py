from .queues import ConnectionStalled, SendQueues  # noqa: F401
from .timesync import SyncUnavailable, estimate_offset, now_us  # noqa: F401
from .connection import Connection, connect  # noqa: F401
from .server import RelayServer  # noqa: F401
from .exploration import ExplorationClient, ExplorationState  # noqa: F401
from .reconstruction import ReconstructionClient  # noqa: F401
from .gateway import ViewerGateway, WebSocket, websocket_connect  # noqa: F401
