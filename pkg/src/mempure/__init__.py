"""Memory-augmented purification of adversarially perturbed vein images.

The package trains a two-scale autoencoder whose latent maps are rewritten
as sparse mixtures of learned memory prototypes, so that adversarial
perturbations — which the memories never stored — are removed before a
recognition model sees the image.
"""

from .attacks import AttackSpec, fgsm_attack, pgd_attack, spsa_attack
from .data import DatasetManifest, load_dataset, make_vein_dataset, split_per_class
from .estimators import MemoryPurifier, VeinMatcher
from .memory import MemoryBank, MemoryModule
from .networks import MsMemAutoencoder, PatchDiscriminator
from .recognition import VeinCNN, evaluate_defense
from .training import TrainConfig, load_checkpoint, save_checkpoint, train_purifier

__version__ = "0.1.0"

__all__ = [
    "AttackSpec", "DatasetManifest", "MemoryBank", "MemoryModule",
    "MemoryPurifier", "MsMemAutoencoder", "PatchDiscriminator", "TrainConfig",
    "VeinCNN", "VeinMatcher", "evaluate_defense", "fgsm_attack",
    "load_checkpoint", "load_dataset", "make_vein_dataset", "pgd_attack",
    "save_checkpoint", "split_per_class", "spsa_attack", "train_purifier",
    "__version__",
]
