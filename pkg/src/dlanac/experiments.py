"""Seeded end-to-end runs and ablation sweeps.

One stage-one run per seed is shared by every ablation of that seed: the
autoencoder weights after pretraining do not depend on the ablation, and
each ablation only changes how stage two is initialized.
"""
from __future__ import annotations

import dataclasses
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

from . import data
from . import training as tr

log = logging.getLogger(__name__)


@dataclass
class RunRecord:
    seed: int
    ablation: str
    auc: float
    M: int | None
    L: int | None
    train_seconds: float
    final_loss: float


@dataclass
class SeedReport:
    seed: int
    pretrain_seconds: float
    data_seconds: float
    ac_M: int | None
    runs: dict = field(default_factory=dict)

    def auc(self, ablation: str) -> float:
        return self.runs[ablation].auc


def prepare_data(preset: str, seed: int, root) -> tuple[list, list, float]:
    """Generate (or reuse) a synthetic set; returns train videos, test videos and seconds spent."""
    start = time.perf_counter()
    root = Path(root)
    if (root / "manifest").exists():
        m = data.load_manifest(root)
    else:
        m = data.generate_synthetic(data.preset(preset, seed=seed), root)
    train, test = data.load_split(m, "train"), data.load_split(m, "test")
    return train, test, time.perf_counter() - start


def run_seed(cfg: tr.TrainConfig, train: list, test: list, ablations, data_seconds: float = 0.0
             ) -> SeedReport:
    """Pretrain once, then train and evaluate every ablation in turn."""
    cfg = cfg.for_frame_size(train[0].frames.shape[1])
    start = time.perf_counter()
    pre = tr.pretrain(cfg, train)
    report = SeedReport(cfg.seed, time.perf_counter() - start, data_seconds,
                        None if pre.ac is None else pre.ac.M)
    log.info("seed %d pretrained in %.0fs, M=%s", cfg.seed, report.pretrain_seconds, report.ac_M)
    for name in ablations:
        t0 = time.perf_counter()
        res = tr.train(dataclasses.replace(cfg, ablation=name), train, pre)
        auc, _ = tr.evaluate(res.ae_state, res.dlan_state, test)
        dl = res.dlan_state
        report.runs[name] = RunRecord(cfg.seed, name, auc, None if dl is None else dl.M,
                                      None if dl is None else dl.L, time.perf_counter() - t0,
                                      float(res.history[-1][-1]) if res.history else float("nan"))
        log.info("seed %d %s: auc %.4f in %.0fs", cfg.seed, name, auc, report.runs[name].train_seconds)
    return report
