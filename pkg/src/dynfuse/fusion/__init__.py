from .hashmap import SpatialHashMap  # noqa: F401
from .tsdf import (  # noqa: F401
    BLOCK,
    BlockData,
    FusionParams,
    VoxelBlock,
    VoxelBlockMap,
    allocate_blocks,
    integrate,
)
from .mc import (  # noqa: F401
    EDGE_TABLE,
    TRI_TABLE,
    EdgeVertex,
    McBlock,
    McCell,
    MissingBlockError,
    cell_payload,
    extract_all_digest,
    extract_mc_block,
    extract_payloads,
    mc_block_to_triangles,
    mesh_digest,
    parse_cell_payload,
    payload_is_empty,
    skip_cell_payload,
)
from .mesh import save_mesh_ply, mesh_rms_to_sdf  # noqa: F401
