"""
Utility modules for logging and helpers.
"""
from .logger import setup_logger, set_global_level

__all__ = ['setup_logger', 'set_global_level']
