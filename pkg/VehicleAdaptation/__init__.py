"""Vehicle re-identification with domain adaptation package."""

from .dataset_index import DatasetIndex, DatasetRecord, Domain, Layout, Split, load_dataset_index, load_query_gallery
from .synthetic import DomainStyle, SyntheticSpec, SyntheticVehicleRenderer, generate_synthetic_domains
from .image_loader import load_image, load_image_batch, normalize, denormalize
from .pair_sampler import PairBatch, VerificationPairSampler, sample_verification_pairs
from .dan_networks import DualBranchAdversarialNetwork, Generator, PatchDiscriminator, SharedStem, translate
from .dan_losses import DanLossReport, LossWeights, dan_total_loss, gram, style_loss
from .image_pool import ImagePool
from .attnet import AttNet, AttendedEmbedding, attnet_total_loss, extract_embeddings, export_embeddings, load_embeddings
from .retrieval_metrics import EvalReport, Protocol, average_precision, evaluate, vehicleid_multi_trial_eval
from .train_config import TrainConfig
from .checkpoint import Checkpoint, CheckpointManager, load_checkpoint, save_checkpoint
from .errors import CheckpointError, NonFiniteLossError
from .run_log import RunLog, configure_logging
from .dan_trainer import Direction, train_dan, translate_dataset
from .reid_trainer import train_reid
from .cmc_plotter import CmcPlotter, plot_cmc

__all__ = [
    "DatasetIndex",
    "DatasetRecord",
    "Domain",
    "Layout",
    "Split",
    "load_dataset_index",
    "load_query_gallery",
    "DomainStyle",
    "SyntheticSpec",
    "SyntheticVehicleRenderer",
    "generate_synthetic_domains",
    "load_image",
    "load_image_batch",
    "normalize",
    "denormalize",
    "PairBatch",
    "VerificationPairSampler",
    "sample_verification_pairs",
    "DualBranchAdversarialNetwork",
    "Generator",
    "PatchDiscriminator",
    "SharedStem",
    "translate",
    "DanLossReport",
    "LossWeights",
    "dan_total_loss",
    "gram",
    "style_loss",
    "ImagePool",
    "AttNet",
    "AttendedEmbedding",
    "attnet_total_loss",
    "extract_embeddings",
    "export_embeddings",
    "load_embeddings",
    "EvalReport",
    "Protocol",
    "average_precision",
    "evaluate",
    "vehicleid_multi_trial_eval",
    "TrainConfig",
    "Checkpoint",
    "CheckpointManager",
    "load_checkpoint",
    "save_checkpoint",
    "CheckpointError",
    "NonFiniteLossError",
    "RunLog",
    "configure_logging",
    "Direction",
    "train_dan",
    "translate_dataset",
    "train_reid",
    "CmcPlotter",
    "plot_cmc",
]
