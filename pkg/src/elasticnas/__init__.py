"""Weight-sharing elastic supernets trained with few labels, plus training-free subnet search."""

from .errors import ElasticNasError
from .space import ArchConfig, SearchSpace, build_space, count_resources, count_subnets, decode, encode
from .supernet import Standalone, Supernet, init_supernet, load_model, save_model
from .tensor import Tensor, no_grad

__version__ = "0.1.0"

__all__ = [
    "ArchConfig", "ElasticNasError", "SearchSpace", "Standalone", "Supernet", "Tensor", "build_space",
    "count_resources", "count_subnets", "decode", "encode", "init_supernet", "load_model", "no_grad",
    "save_model",
]
