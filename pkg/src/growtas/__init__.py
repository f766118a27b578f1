"""Progressive-subspace supernet training and architecture search for small
vision-transformer-style models, on a pure numpy substrate."""
from .errors import (CapacityError, ConfigurationError, CorruptionError, DataError, DimensionError,
                     FormatError, GrowTASError, InputError, NumericError, VersionError)
from .rng import SeededRng
from .space import Architecture, SearchSpace, SubspacePartition, enumerate_space, param_count, sample_uniform
from .supernet import OptimConfig, SupernetWeights, evaluate, forward, init_weights, train_step
from .scheduler import Schedule, build_freeze_mask, finetune_plus, train_grow_tas, train_uniform
from .evo import EvoConfig, search, search_supernet
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint

__version__ = "0.1.0"
