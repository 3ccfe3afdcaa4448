"""Lightweight neural waveform speech codec.

A convolutional autoencoder with trainable soft-to-hard quantization,
an optional LPC front end whose LSP quantizer is trained jointly with the
neural modules, and a cascade of residual coders for higher bitrates.
Everything runs on numpy through the small reverse-mode engine in
:mod:`nwcodec.diffgraph`.
"""

from .bitstream import Container, HuffmanCodebook, build_huffman, read_container, write_container
from .cmrl import MODES, Cascade, CascadeConfig, EntropyController, TrainConfig, Trainer
from .nwc import NwcModule, param_count
from .softquant import SoftQuantizer, bitrate, entropy_estimate, penalty_lq

__version__ = "0.1.0"

__all__ = [
    "Cascade", "CascadeConfig", "Container", "EntropyController", "HuffmanCodebook", "MODES", "NwcModule",
    "SoftQuantizer", "TrainConfig", "Trainer", "bitrate", "build_huffman", "entropy_estimate", "param_count",
    "penalty_lq", "read_container", "write_container",
]
