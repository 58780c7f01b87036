"""Dual-path edge/semantic network for infrared small target detection, in numpy."""

__version__ = "0.1.0"
