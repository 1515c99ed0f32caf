"""
jigsaw-mil - Core Modules
Multiple instance learning with a shuffling-equivalence (instance jigsaw) regularizer
"""

__version__ = "1.0.0"
__description__ = "Autodiff engine, MIL networks, Siamese trainer and verification suites"

from .data_handler import DataHandler
from .synthetic import SyntheticBagGenerator
from .jigsaw import SiameseTrainer
from .interpret import CamExplainer
from .report_generator import ReportGenerator

__all__ = [
    'DataHandler',
    'SyntheticBagGenerator',
    'SiameseTrainer',
    'CamExplainer',
    'ReportGenerator'
]
