"""Safe object extraction from cluttered piles.

A desk-scale pipeline: a deterministic sphere-compound rigid-body simulator,
occupancy mapping with object-level pose estimation, a transformer Q-network
trained by DQN to pick extraction motions that disturb the rest of the pile
as little as possible, and planner baselines to compare against.
"""

__version__ = "0.1.0"

from . import geom  # noqa: F401
