"""
A synthetic city and its sensor
===============================

A road lattice lined with box landmarks stands in for a real city. Trips drive
loops through it; each reading gets a ray-cast lidar sweep, a noisy GPS fix and
weather/occlusion tags.
"""

# %%
import numpy as np

from pitloc.synth import (ConditionTags, GpsModel, RayPattern, SweepConfig, TripSpec, WorldSpec, calibrate_gps_sigma,
                          generate_world, lattice_loop, simulate_sweep, simulate_trip)

world = generate_world(WorldSpec(seed=3, extent=(600.0, 600.0), landmark_count=300))
print("road lines:", len(world.road_x), "x", len(world.road_y), "landmarks:", len(world.landmarks))

# %%
# GPS noise is calibrated so the planar error has a chosen median.
sigma = calibrate_gps_sigma(3.40)
route = lattice_loop(world, 1, 1)
trip = simulate_trip(world, TripSpec(1, route, spacing=2.0), GpsModel(sigma), seed=0)
err = [np.hypot(g.x - p.x, g.y - p.y) for p, g in zip(trip.poses, trip.gps)]
print(f"{len(trip.poses)} readings, GPS median error {np.median(err):.2f} m (sigma {sigma:.3f})")

# %%
# The same place on a clear day and on a cluttered, rainy one.
sensor = SweepConfig(RayPattern(32, -15.0, 15.0, 180), max_range=40.0, clutter_objects=24)
pose = trip.poses[10]
clear = simulate_sweep(world, pose, ConditionTags(), 0, sensor)
busy = simulate_sweep(world, pose, ConditionTags(precipitation=12.0, lidar_occlusion=40.0), 0, sensor)
print("clear:", len(clear), "points")
print("busy :", len(busy), "points, of which", int(busy.dynamic.sum()), "are clutter")
