"""Binary user/item codes learned with Hamming-space graph convolution,
plus popcount top-k retrieval and ranking evaluation."""
from .hamming import (
    CodeMatrix, HashCode, hamming_distance, pack, read_codes, similarity_score, unpack, write_codes,
)
from .graph import (
    BipartiteGraph, BprSampler, InteractionDataset, SplitSpec, build_graph, load_interactions,
    sample_bpr_triple, split,
)
from .model import ModelConfig, beta_schedule, bpr_loss, forward, predict
from .trainer import TrainConfig, TrainReport, export_codes, load_checkpoint, save_checkpoint, train
from .retrieval import CodeIndex, build_index, topk_probe, topk_scan, bench
from .metrics import MetricsTable, evaluate

__version__ = "0.1.0"
