"""Continuous-time spatiotemporal calibration of a rolling-shutter camera-IMU rig."""

__version__ = "0.1.0"
