"""Desk-scale training study.

Trains a small LPC + NWC cascade on a corpus directory and measures the
training behaviours that can be checked without a full-size run: the
Phase-I loss drop of the first NWC, the entropy controller reaching the
bitrate target, Phase II not degrading the Phase-I result and a second
NWC (pretrained on its residual, then finetuned with the rest) lowering
the reconstruction loss.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .cmrl import MODES, Cascade, CascadeConfig, TrainConfig, Trainer, load_frames

# settings that fit the whole study into well under an hour on one core
DESK_CONFIG = dict(epochs=60, lpc_epochs=6, phase2_epochs=6, batch_size=32, batches_per_epoch=12,
                   val_frames=256, patience=10)
PROBE_FRAMES = 256


@dataclass
class DeskReport:
    """Measurements of one desk-scale run (losses are per-frame means)."""

    mode: str
    target_bits_per_frame: float
    initial_val_loss: float
    val_losses: list[float]
    total_bits_per_frame: list[float]
    lpc_bits_per_frame: float
    phase1_train_loss: float
    phase2_train_loss: float
    one_nwc_recon: float
    two_nwc_recon: float
    two_nwc_pretrained_recon: float
    seconds: dict[str, float] = field(default_factory=dict)

    def val_drop(self, within: int = 20) -> float:
        """Relative drop of the best validation loss in the first ``within`` epochs."""
        best = min(self.val_losses[:within])
        return 1.0 - best / self.initial_val_loss

    def epochs_to_target(self, tolerance: float = 0.1) -> int | None:
        """First epoch whose total soft-entropy rate lies within ``tolerance`` of the target."""
        for epoch, bits in enumerate(self.total_bits_per_frame, 1):
            if abs(bits - self.target_bits_per_frame) <= tolerance * self.target_bits_per_frame:
                return epoch
        return None


def desk_study(corpus_root, mode: str = "low", seed: int = 0, cfg: TrainConfig | None = None,
               second_nwc_epochs: int = 20, log=None) -> tuple[DeskReport, Cascade]:
    """Run the study; returns the report and the final two-NWC cascade."""
    cfg = cfg or TrainConfig(seed=seed, **DESK_CONFIG)
    seconds = {}
    t0 = time.perf_counter()
    train, val = load_frames(corpus_root)
    seconds["load"] = time.perf_counter() - t0

    cascade = Cascade(CascadeConfig.from_mode(mode), seed=seed)
    trainer = Trainer(cascade, train, val, cfg, log)
    probe = train.subset(np.random.default_rng(seed + 2).choice(len(train), min(PROBE_FRAMES, len(train)),
                                                                replace=False))

    t0 = time.perf_counter()
    trainer.train_lpc()
    seconds["lpc"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    info = trainer.train_nwc(0)
    seconds["nwc0"] = time.perf_counter() - t0
    recs = [r for r in trainer.history if r.get("module") == "nwc0" and r.get("epoch", 0) >= 1
            and "val_loss" in r]
    lpc_bits = trainer.module_bits["lpc"]

    t0 = time.perf_counter()
    phase1 = trainer.global_loss(probe)
    trainer.phase2()
    phase2 = trainer.global_loss(probe)
    seconds["phase2"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    _, _, high_bps = MODES["high"]
    cascade.add_nwc()
    cascade.config = CascadeConfig(cascade.config.use_lpc, len(cascade.nwcs), high_bps)
    trainer.module_bits["lpc"] = lpc_bits
    trainer.train_nwc(1, second_nwc_epochs)
    two_pre = trainer.global_loss(probe)
    # a newly added module is pretrained on its residual, then the whole
    # cascade is finetuned jointly, exactly as for the first one
    trainer.phase2()
    two = trainer.global_loss(probe)
    seconds["nwc1"] = time.perf_counter() - t0

    report = DeskReport(
        mode=mode,
        target_bits_per_frame=CascadeConfig.from_mode(mode).target_bits_per_frame,
        initial_val_loss=info["initial_val_loss"],
        val_losses=[r["val_loss"] for r in recs],
        total_bits_per_frame=[lpc_bits + r["bits_per_frame"] for r in recs],
        lpc_bits_per_frame=lpc_bits,
        phase1_train_loss=phase1["total"],
        phase2_train_loss=phase2["total"],
        one_nwc_recon=phase2["recon"],
        two_nwc_recon=two["recon"],
        two_nwc_pretrained_recon=two_pre["recon"],
        seconds=seconds,
    )
    return report, cascade

