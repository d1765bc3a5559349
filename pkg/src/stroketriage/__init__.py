"""Three-way stroke CT classification: data, cGAN synthesis, transformer backbones, evaluation, Grad-CAM."""

from .data import CLASS_NAMES, NUM_CLASSES

__version__ = "0.1.0"

__all__ = ["CLASS_NAMES", "NUM_CLASSES", "__version__"]
