"""Deterministic simulator of a validator-scored incentive mechanism for
permissionless distributed training."""

from .codec import (CodecConfig, CompressedDelta, ErrorFeedbackState, dct_decode, dct_encode,
                    demo_aggregate, demo_pseudo_gradient, deserialize_delta, serialize_delta,
                    topk_compress)
from .config import PRESETS, RunConfig, build_config, load_config
from .harness import Simulation, read_trace, report, run
from .model import (ConfigError, DataPool, DataShard, Dataset, ModelConfig, StructureError,
                    forward_loss, gradient, init_model)
from .rating import Rating, new_rating, ordinal, rate_match
from .validator import (EvaluationConfig, LinearWarmup, Validator, checkpoint_catchup,
                        normalize_scores, peer_score, top_g_weights)

__version__ = "0.1.0"
