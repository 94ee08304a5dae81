"""Information-bottleneck critical-point attribution for point-cloud classifiers."""

__version__ = "0.1.0"
