"""Minimum-time quadrotor flight through waypoint tracks.

Pipeline: plan topological guiding paths on an ESDF of the scene, then
train a thrust/body-rate policy with curriculum PPO to race the track.
"""

__version__ = "0.1.0"
