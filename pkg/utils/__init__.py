"""
jigsaw-mil - Utility Modules
Checkpoint and report files, configuration parsing and validation
"""

__version__ = "1.0.0"
__description__ = "Utility modules for file operations and configuration validation"

from .file_operations import FileOperations
from .validation import ConfigValidator

__all__ = [
    'FileOperations',
    'ConfigValidator'
]
