"""Training-free few-shot point-cloud segmentation (Seg-NN) and its light trainable variant (Seg-PN)."""
from .encoder import Encoder, EncoderConfig, encode_scene
from .estimators import SegNN, SegNNEncoder, SegPN
from .exceptions import ConfigError, DataError, NumericalError, ParseError, SegNNError
from .fewshot import Episode, segnn_predict
from .pointcloud import LabeledCloud, load_cloud, save_cloud
from .quest import QuestConfig, segpn_predict

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "DataError", "Encoder", "EncoderConfig", "Episode", "LabeledCloud", "NumericalError",
    "ParseError", "QuestConfig", "SegNN", "SegNNEncoder", "SegNNError", "SegPN", "encode_scene", "load_cloud",
    "save_cloud", "segnn_predict", "segpn_predict",
]
