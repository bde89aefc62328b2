"""Wheel odometry and sensor-extrinsic calibration.

Submodules are imported on demand; the package root only exposes the
version string.
"""

from importlib.metadata import PackageNotFoundError, version

try:
    __version__ = version("wheelcal")
except PackageNotFoundError:  # running from a source tree without install
    __version__ = "0.0.0"
