"""Detection and segmentation evaluation for agar plate imagery.

Batch pipeline for running a promptable detector over plate photos,
caching results, and scoring them against annotated ground truth.
"""

__version__ = "0.1.0"
