"""Neural HMM acoustic model with an invertible flow post-net, in numpy."""

from .autodiff import Tensor, backward, no_grad
from .data import CorpusConfig, NormStats, Utterance, generate_corpus, load_corpus, normalize_stats, save_corpus
from .flow import ActNorm, ChannelMix, CouplingLayer, FlowStack, flow_forward, flow_inverse
from .model import Batch, ModelConfig, OverflowModel
from .nhmm import AlignmentPath, EncoderStates, NeuralHMM, NHMMConfig, quantile_transition
from .training import TrainConfig, evaluate, load_checkpoint, train

__version__ = "0.1.0"
