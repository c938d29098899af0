"""Chunk-wise selective-scan deblurring with a FIFO memory bank and an Ising regulariser."""
from .errors import ConfigError, NumericError
from .losses import LossReport, LossWeights, ising_loss, total_loss
from .memvssm import FCAM, DecoderBlock, DecoderBlockConfig, MemoryBank, MemVSSM, chunk_split
from .model import MBMamba, ModelConfig, RestoredOutputs, freeze_encoder, unfreeze_encoder
from .ssm import MambaBlock, ScanParams, selective_scan

__all__ = [
    "ConfigError", "NumericError", "LossReport", "LossWeights", "ising_loss", "total_loss",
    "FCAM", "DecoderBlock", "DecoderBlockConfig", "MemoryBank", "MemVSSM", "chunk_split",
    "MBMamba", "ModelConfig", "RestoredOutputs", "freeze_encoder", "unfreeze_encoder",
    "MambaBlock", "ScanParams", "selective_scan",
]
