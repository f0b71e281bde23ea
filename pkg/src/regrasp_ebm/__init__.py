"""Energy-based shared-grasp connectivity and regrasp sequence planning."""
__version__ = "0.1.0"
