"""Global + local feature fusion detector for AI-synthesized images."""
from .core import EMBEDDING_DIM, Embedding, FeatureMap, ImageTensor, load_image, resize_bilinear
from .detector import Detector, DetectorConfig, load_checkpoint, save_checkpoint

__version__ = "0.1.0"
