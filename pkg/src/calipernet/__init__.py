"""Point-supervised segmentation for measuring the distance between two landmarks."""

from .data import Sample, kfold_split, load_dataset, synth_generate
from .loss import AnnotationSet, lcfcn_loss
from .measurement import MeasurementLine, measure
from .metrics import build_report, paired_t_test
from .model import ModelConfig, build_model, load_checkpoint, save_checkpoint
from .trainer import TrainConfig, cross_validate, train_fold

__version__ = "0.1.0"
