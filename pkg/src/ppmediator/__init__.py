"""Rerank segmentation and parse hypotheses jointly to resolve prepositional phrase attachment."""
from .mediator import MediatorModel, PairIndex, TrainConfig, infer, train
from .parser import default_grammar, load_grammar, parse_kbest
from .scenegen import GenConfig, generate_dataset
from .segmenter import GridCRF, divmbest, jaccard, map_inference

__version__ = "0.1.0"
