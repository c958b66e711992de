"""Universal adversarial perturbations against ranking-based retrieval models."""
from .attack import AttackConfig, combined_loss_grad, momentum_step, project, train_uap
from .data import Perturbation, SyntheticSpec, generate_synthetic, load_uap, save_uap, select_split
from .embedders import ARCHITECTURES, Embedder, TrainConfig, load_model, save_model, train_embedder
from .harness import cross_matrix, energy_report, epsilon_sweep, evaluate_attack
from .metrics import AttackReport, RankedQuery, exact_ap, mean_ap, rank1
from .regularizer import MiConfig, gradient_energy, mi_grad, mi_loss
from .softrank import SoftApConfig, ap_loss, ap_loss_grad, soft_ap_from_distances

__version__ = "0.1.0"
