"""Cubature Kalman filtering with a learned, GRU-based CKF (CKFNet)."""

__version__ = "0.1.0"
