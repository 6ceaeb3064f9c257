from .archive import ArchiveError, dump_archive, load_archive, parse_archive, save_archive
from .core import ShapeError, Tape, TapeRecord, Tensor, as_tensor
from .gradcheck import KinkError, finite_difference_gradcheck, gradcheck_random
from .gru import GruParams, gru_cell
from .ops import (
    activation,
    concat,
    cosine_distance,
    huber_loss,
    matmul,
    reduce_max_over_points,
    relu,
    sigmoid,
    softmax_cross_entropy,
    tanh,
)
from .optim import AdamState, adam_step

__all__ = [
    "AdamState", "ArchiveError", "GruParams", "KinkError", "ShapeError", "Tape", "TapeRecord",
    "Tensor", "activation", "adam_step", "as_tensor", "concat", "cosine_distance", "dump_archive",
    "finite_difference_gradcheck", "gradcheck_random", "gru_cell", "huber_loss", "load_archive",
    "matmul", "parse_archive", "reduce_max_over_points", "relu", "save_archive", "sigmoid",
    "softmax_cross_entropy", "tanh",
]
