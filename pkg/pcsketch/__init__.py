"""CountSketch and Private CountSketch: linear sketches with calibrated Gaussian noise."""

__version__ = "0.1.0"
