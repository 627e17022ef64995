"""Visual-inertial odometry with attention-based sensor fusion and Laplace uncertainty."""

__version__ = "0.1.0"
