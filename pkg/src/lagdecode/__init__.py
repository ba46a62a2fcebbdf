"""Constrained decoding of toy language models by gradient descent on
relaxed output sequences with Lagrange multipliers."""

from .decoder import (Constraint, DecoderConfig, DecodeResult, DecodeTrace, LinearWeights,
                      decode, decode_fixed_length, greedy_decode, linear_combination_decode)
from .objectives import ObjectiveHandle, discrete_eval, solve_transport
from .simplex import SoftSequence
from .toy_models import (ToyModel, generate_corpus, load_model, save_model, train_classifier,
                         train_lm)

__version__ = "0.1.0"
