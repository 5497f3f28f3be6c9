"""Demand-driven eductive runtime with a recognition pipeline on top.

The package splits along tier boundaries: ``demand`` holds the value types,
``store`` the memoizing demand store, ``transport`` the broker messaging,
``runtime`` the tier/topology layer, ``pipeline`` the recognition
application, ``resilience`` the WAL and self-managing supervisors, and
``mgmt``/``service``/``cli`` the operator surface.
"""

__version__ = "0.1.0"
