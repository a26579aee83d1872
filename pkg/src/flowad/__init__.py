"""Low-rank tensor plus sparse recovery of network flow anomalies.

Classical BSCA solvers, their unrolled and adaptive network forms, AUC-based
training and a synthetic / trace-driven data pipeline.
"""

__version__ = "0.1.0"
