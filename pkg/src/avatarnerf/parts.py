"""Segmentation class ids shared by the dataset schema, the sampler and routing."""

BACKGROUND = 0
BODY = 1
ARMS = 2
HANDS = 3
HEAD = 4

NUM_CLASSES = 5

CLASS_NAMES = ("background", "body", "arms", "hands", "head")
