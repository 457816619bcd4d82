from .scripts import (  # noqa: F401
    CameraPath,
    Primitive,
    SceneObject,
    SceneScript,
    Trajectory,
    bundled_scripts,
    look_at,
    moving_box,
    oof_box,
    static_room,
)
from .render import SyntheticSequence  # noqa: F401
from .container import (  # noqa: F401
    ContainerSequence,
    read_container,
    write_container,
)
