"""Occ3D-nuScenes class table."""

CLASS_NAMES = (
    "others",
    "barrier",
    "bicycle",
    "bus",
    "car",
    "construction_vehicle",
    "motorcycle",
    "pedestrian",
    "traffic_cone",
    "trailer",
    "truck",
    "driveable_surface",
    "other_flat",
    "sidewalk",
    "terrain",
    "manmade",
    "vegetation",
    "free",
)

NUM_CLASSES = len(CLASS_NAMES)
FREE = NUM_CLASSES - 1
SEMANTIC_CLASSES = tuple(range(FREE))

# ground and background structure; everything else can move
STATIC_CLASSES = frozenset(
    CLASS_NAMES.index(name)
    for name in (
        "driveable_surface",
        "other_flat",
        "sidewalk",
        "terrain",
        "manmade",
        "vegetation",
        "barrier",
    )
)
