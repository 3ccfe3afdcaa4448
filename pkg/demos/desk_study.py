"""Run the desk-scale training study on a freshly synthesized corpus.

Writes a 10 minute training and 1 minute validation corpus to a
temporary directory, trains a low-mode cascade and prints the measured
training behaviours. Expect roughly half an hour on a single core.

    python demos/desk_study.py [minutes]
"""

import sys
import tempfile

from nwcodec.cli import format_record
from nwcodec.corpus import write_corpus
from nwcodec.study import desk_study


def main(minutes: float = 10.0) -> None:
    with tempfile.TemporaryDirectory() as root:
        write_corpus(root, minutes=minutes, val_minutes=1.0, seed=0)
        report, _ = desk_study(root, mode="low", seed=0, log=lambda rec: print(format_record(rec), flush=True))
    print(f"validation loss drop in 20 epochs: {100 * report.val_drop(20):.1f}%")
    print(f"epochs to reach {report.target_bits_per_frame:.0f} bits/frame +-10%: {report.epochs_to_target(0.1)}")
    print(f"global loss before/after phase II: {report.phase1_train_loss:.4f} / {report.phase2_train_loss:.4f}")
    print(f"reconstruction loss one NWC: {report.one_nwc_recon:.4f}, two NWC: {report.two_nwc_recon:.4f} "
          f"(before joint finetuning {report.two_nwc_pretrained_recon:.4f})")
    print("seconds " + " ".join(f"{k}={v:.0f}" for k, v in report.seconds.items()))


if __name__ == "__main__":
    main(*(float(a) for a in sys.argv[1:2]))
