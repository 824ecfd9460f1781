"""
Poses, frames and distances
===========================

Every reading carries a planar pose. Points move between the world frame and
the sensor frame by a translation and a rotation about z; distances used for
mining and scoring are horizontal only.
"""

# %%
# A pose is position, heading in degrees, and trip/time identity.
import numpy as np

from pitloc.core import Pose, geo_distance, heading_delta, points_to_sensor_frame, points_to_world_frame

pose = Pose(10.0, 5.0, 90.0, trip_id=1, timestamp=0.0, reading_id=1)
print(pose)

# %%
# A point one metre north of a north-facing sensor is straight ahead (+x).
world = np.array([[10.0, 6.0, 1.5]])
sensor = points_to_sensor_frame(world, pose)
print("sensor frame:", sensor.round(12))
print("round trip  :", points_to_world_frame(sensor, pose))

# %%
# Headings wrap: 359 and 1 degrees are 2 degrees apart.
print("heading gap:", heading_delta(359.0, 1.0))
print("planar distance:", geo_distance(pose, Pose(13.0, 9.0)))
