"""Domain-adversarial mitosis detection with stain normalization and color augmentation."""
from .model import MitosisClassifier, DomainBranch
from .trainer import TrainingConfig, run_training
from .evaluation import dense_inference, local_maxima, match_detections, evaluate

__version__ = "0.1.0"
