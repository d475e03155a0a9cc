"""Neuron-centric neural network training on a simulated parameter-server cluster."""

from .cluster import ClusterConfig, ParameterServer, SyncMode
from .model import LayerSpec, NetworkModel, ParameterDelta, WeightStore, build_mlp, feed_forward, back_propagate, predict
from .numeric import ActivationKind, Rng
from .neuron import NeuronKind
from .partition import MaskPolicy, SubModelMask, generate_submodel, split_dataset
from .trainer import Hyperparams, train, evaluate

__version__ = "0.1.0"

__all__ = [
    "ActivationKind", "ClusterConfig", "Hyperparams", "LayerSpec", "MaskPolicy", "NetworkModel",
    "NeuronKind", "ParameterDelta", "ParameterServer", "Rng", "SubModelMask", "SyncMode",
    "WeightStore", "back_propagate", "build_mlp", "evaluate", "feed_forward", "generate_submodel",
    "predict", "split_dataset", "train",
]
