"""
Weakly supervised temporal action localization with learned segment graphs.
"""

__version__ = "0.1.0"
