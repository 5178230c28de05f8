"""
Sheetspace

Finite-difference verification of the Kaehler geometry of the space of
codimension-2 world-sheets and of their twistor lifts.
"""

__version__ = "1.0.0"
__author__ = "Sheetspace Team"
