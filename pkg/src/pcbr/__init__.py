"""Top-level package for pcbr, a framework for prototype case-based reasoning image classifiers."""

__author__ = """Rick McGeer"""
__email__ = 'rick@mcgeer.com'
__version__ = '0.1.0'

from pcbr.pcbr_utils import DTYPE, PCBR_PROTOPNET, PCBR_PROTOTREE, PCBR_CLASSIFIER_KINDS
from pcbr.pcbr_utils import PCBR_PROTOPNET_LOG, PCBR_EXP_NEG_L2, PCBR_SIMILARITY_KINDS, PCBR_PARAM_GROUPS
from pcbr.pcbr_utils import PCBR_ATTRIBUTION_TYPES, PCBR_VIEW_TYPES, PCBR_PERTURBATION_KINDS, PCBR_SUBSTREAMS
from pcbr.pcbr_utils import PCBR_SNAPSHOT_FILES, PCBR_CONFIG_KINDS, PCBR_FORMAT_VERSION
from pcbr.pcbr_utils import PCBRException, ConfigSyntaxException, SchemaException, UnknownBackboneException
from pcbr.pcbr_utils import ShapeMismatchException, ValueOutOfRangeException, NonFiniteLossException
from pcbr.pcbr_utils import EmptyProjectionSetException, AllPrunedException, UnknownDatasetException
from pcbr.pcbr_utils import InactivePrototypeException, UnsupportedLayerException, UnknownKindException
from pcbr.pcbr_utils import MissingMaskException, SchemaMismatchException, VersionMismatchException
from pcbr.pcbr_utils import HashMismatchException, CorruptFileException, UnknownFormatException
from pcbr.pcbr_utils import MissingParameterException, UnmappedParameterException
from pcbr.pcbr_utils import jsonifiable_value, canonical_json, json_line, sha256_hex, hash64
from pcbr.pcbr_registry import Registry
from pcbr.pcbr_config import ConfigSpec, ModelSpec, DataSpec, TrainSpec, VizSpec, PCBR_SPEC_CLASSES
from pcbr.pcbr_config import parse_config, canonicalize, load_config, snapshot_configs, load_snapshot
from pcbr.pcbr_repro import RngSnapshot, ReproContext, init_repro, read_seed, capture, restore
from pcbr.pcbr_data import DatasetItem, Dataset, DATASETS, synth_shapes, image_folder, load_dataset, read_image
from pcbr.pcbr_data import TransformPipeline, ImageBatch, to_batch, batches
from pcbr.pcbr_model import BACKBONES, small_cnn, PrototypeRecord, PrototypeBank, LatentMap, SimilarityMap
from pcbr.pcbr_model import ClassScores, LinearHead, TreeHead, CbrModel, build_model, extract, forward
from pcbr.pcbr_model import squared_distances, similarity, decide_linear, decide_tree, path_probabilities, greedy_path
from pcbr.pcbr_train import TrainState, build_optimizer, trainable_groups, apply_freeze, loss_protopnet
from pcbr.pcbr_train import loss_prototree, evaluate, project, prune, train
from pcbr.pcbr_attribution import AttributionMap, PatchView, PRP_RULES, attr_upsampling, attr_backprop
from pcbr.pcbr_attribution import attr_smoothgrad, attr_randgrads, attr_prp, compute_attribution, attribution_rng
from pcbr.pcbr_attribution import bounding_box, render_view, save_view
from pcbr.pcbr_metrics import PerturbationResult, relevance_mask, perturb, perturbation_scores
from pcbr.pcbr_metrics import perturbation_benchmark, pointing_game, write_results
from pcbr.pcbr_persistence import LegacyMapping, save_checkpoint, load_checkpoint, set_mode, import_legacy
from pcbr.pcbr_persistence import write_tensors, read_tensors, PCBR_LEGACY_FORMATS
