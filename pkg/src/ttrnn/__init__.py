"""Tensor-train compressed LSTM and GRU cells with a small autograd engine."""
from .cells import GATES, init_cell, run_sequence
from .config import RunConfig
from .estimators import TTRNNClassifier, TTRNNSpeakerEncoder
from .tt_format import TTMatrix, tt_matvec, tt_svd, tt_to_dense

__all__ = ["GATES", "RunConfig", "TTMatrix", "TTRNNClassifier", "TTRNNSpeakerEncoder", "init_cell",
           "run_sequence", "tt_matvec", "tt_svd", "tt_to_dense"]
__version__ = "0.1.0"
