"""Encode and decode a synthetic utterance with an untrained cascade.

Shows the full coding path: framing, LPC analysis, NWC coding, Huffman
packing into a container, decoding and overlap-add. The models are
randomly initialized, so the interesting numbers are the bitrate and
the bit-exact container round trip, not the SNR.

    python demos/roundtrip.py [low|mid|high]
"""

import sys

import numpy as np

from nwcodec import Cascade, CascadeConfig, read_container, write_container
from nwcodec.cli import mel_distortion, snr_db
from nwcodec.corpus import synth_utterance


def main(mode: str = "low") -> None:
    cascade = Cascade(CascadeConfig.from_mode(mode), seed=0)
    x = synth_utterance(2.0, seed=1)
    container = cascade.encode_signal(x)

    raw = write_container(container)
    again = read_container(raw)
    y = cascade.decode_container(again)

    seconds = len(x) / 16000
    print(f"mode={mode} modules={','.join(cascade.module_names)} frames={len(container.frames)}")
    print(f"container bytes={len(raw)} payload bps={container.bitrate:.0f} file bps={8 * len(raw) / seconds:.0f}")
    print(f"samples in={len(x)} out={len(y)} snr_db={snr_db(x, y):.2f}")
    print("mel distortion " + " ".join(f"{k}={v:.3f}" for k, v in mel_distortion(x, y).items()))
    assert np.array_equal(y, cascade.decode_container(container))


if __name__ == "__main__":
    main(*sys.argv[1:2])
