"""Mitosis detection in phase-contrast style two-channel microscopy movies.

Pipeline: a multiclass Hough forest detects mother and daughter cells per
frame, then a small CRF links mother detections at frame t with daughter
pairs at t+1 into scored division events.
"""

__version__ = "0.1.0"
