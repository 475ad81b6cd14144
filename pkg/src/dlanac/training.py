"""Two-stage training, checkpoint conversion and evaluation.

Stage one trains the autoencoder on intensity and gradient losses while the
clusterer watches detached bottleneck maps. Stage two seeds the aggregation
network from the clusterer and trains everything on all four losses.

All randomness comes from one seed, split into independent streams so that
switching the clusterer on or off does not perturb autoencoder training.
"""
from __future__ import annotations

import copy
import csv
import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import ac as som
from . import autoencoder as ae
from . import data
from . import dlan as dl
from . import model, scoring
from .checkpoint import Checkpoint
from .diffcore import ConfigError
from .losses import LossReport, LossWeights, TrainingError
from .optim import Adam, cosine_lr

log = logging.getLogger(__name__)

ABLATIONS = ("none", "no-ac", "no-dlan", "no-drcs", "rand-init")
FORMAT_TAG = "dlanac"


class DivergenceError(TrainingError):
    """Loss became non-finite; ``last_good`` holds the last completed-epoch checkpoint."""

    def __init__(self, msg, last_good: Checkpoint | None = None):
        super().__init__(msg)
        self.last_good = last_good


@dataclass
class SomConfig:
    L: int = 25
    delta0: float = 0.5
    eta0: float = 0.5
    k: int = 320
    init_scale: float = 1e-2


@dataclass
class TrainConfig:
    stage1_epochs: int = 10
    stage2_epochs: int = 40
    batch_size: int = 8
    lr0: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    alpha: float = 10.0
    use_ac: bool = True
    ablation: str = "none"
    seed: int = 0
    ae: ae.AeConfig = field(default_factory=ae.AeConfig)
    som: SomConfig = field(default_factory=SomConfig)
    losses: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if self.stage1_epochs < 0 or self.stage2_epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        parse_ablation(self.ablation)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        nested = {"ae": ae.AeConfig, "som": SomConfig, "losses": LossWeights}
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        for key, typ in nested.items():
            if key in d and isinstance(d[key], dict):
                check_field_types(typ, d[key], key)
                d[key] = typ(**d[key])
            elif key in d and not isinstance(d[key], typ):
                raise ConfigError(f"{key} must be a JSON object")
        check_field_types(cls, {k: v for k, v in d.items() if k not in nested}, "config")
        return cls(**d)

    def merged(self, overrides: dict) -> "TrainConfig":
        base = self.to_dict()
        for k, v in overrides.items():
            if isinstance(v, dict) and isinstance(base.get(k), dict):
                base[k] = {**base[k], **v}
            else:
                base[k] = v
        return TrainConfig.from_dict(base)

    def for_frame_size(self, S: int) -> "TrainConfig":
        if self.ae.frame_size == S:
            return self
        return dataclasses.replace(self, ae=dataclasses.replace(self.ae, frame_size=S))


def check_field_types(cls, values: dict, where: str) -> None:
    """Reject unknown keys and values whose type differs from the field default."""
    defaults = {f.name: f.default for f in dataclasses.fields(cls)}
    bad = set(values) - set(defaults)
    if bad:
        raise ConfigError(f"unknown keys in {where}: {sorted(bad)}")
    for k, v in values.items():
        want = type(defaults[k])
        if want is float and isinstance(v, int) and not isinstance(v, bool):
            continue
        if want in (tuple, list):
            want = (tuple, list)
        elif want not in (int, float, bool, str):
            continue
        if not isinstance(v, want) or (want is int and isinstance(v, bool)):
            raise ConfigError(f"{where}.{k} has type {type(v).__name__}, expected "
                              f"{type(defaults[k]).__name__}")


def parse_ablation(name: str) -> tuple[str, int | None]:
    """``'fixed-m=10'`` -> ``('fixed-m', 10)``; other names map to ``(name, None)``."""
    if name.startswith("fixed-m="):
        try:
            m = int(name.split("=", 1)[1])
        except ValueError:
            raise ConfigError(f"bad ablation {name!r}") from None
        if m < 1:
            raise ConfigError("fixed-m needs M >= 1")
        return "fixed-m", m
    if name not in ABLATIONS:
        raise ConfigError(f"unknown ablation {name!r}; choose from {ABLATIONS + ('fixed-m=N',)}")
    return name, None


def _streams(seed: int) -> dict[str, np.random.Generator]:
    names = ("ae_init", "shuffle1", "som", "shuffle2", "dlan_init")
    kids = np.random.SeedSequence(seed).spawn(len(names))
    return {n: np.random.default_rng(s) for n, s in zip(names, kids)}


@dataclass
class PretrainResult:
    ae_state: ae.AeState
    ac: som.AcResult | None
    history: list
    som_state: som.SomState | None = None


@dataclass
class TrainResult:
    ae_state: ae.AeState
    dlan_state: dl.DlanState | None
    ac: som.AcResult | None
    checkpoint: Checkpoint
    history: list


# -- shared loop -----------------------------------------------------------

def _run_epochs(videos, cfg: TrainConfig, ae_state, dlan_state, opt: Adam, rng,
                start_epoch: int, end_epoch: int, total_epochs: int, step: int,
                weights: LossWeights, on_batch=None, log_rows=None, on_epoch=None):
    pairs = data.window_index(videos)
    if not pairs:
        raise data.ManifestError("no training windows")
    bs = cfg.batch_size
    per_epoch = math.ceil(len(pairs) / bs)
    total_steps = per_epoch * total_epochs
    params = dict(ae_state.params)
    if dlan_state is not None:
        params.update(dlan_state.params)
    dtype = ae_state["enc0.w"].value.dtype
    history = []
    for epoch in range(start_epoch, end_epoch):
        perm = rng.permutation(len(pairs))
        sums = np.zeros(5)
        for bi in range(per_epoch):
            batch = [pairs[j] for j in perm[bi * bs:(bi + 1) * bs]]
            x, y = data.batch_windows(videos, batch, dtype)
            for p in params.values():
                p.zero_grad()
            rep, F = _checked(model.loss_and_grad, x, y, ae_state, dlan_state, weights)
            opt.step(params, cosine_lr(step, total_steps, cfg.lr0))
            step += 1
            sums += rep.as_row()
            if log_rows is not None:
                log_rows.append([epoch + 1, step] + rep.as_row())
            if on_batch is not None:
                on_batch(F)
        mean = LossReport(*(sums / per_epoch))
        history.append(mean.as_row())
        log.info("epoch %d/%d loss %.5f", epoch + 1, total_epochs, mean.total)
        if on_epoch is not None:
            on_epoch(epoch + 1, step, mean.as_row())
    return step, history


def _checked(fn, *args):
    try:
        rep, F = fn(*args)
    except TrainingError as exc:
        raise DivergenceError(str(exc)) from exc
    if not np.isfinite(rep.total):
        raise DivergenceError("total loss is not finite")
    return rep, F


def _write_log(path, rows):
    if path is None or not rows:
        return
    path = Path(path)
    new = not path.exists()
    with open(path, "a", newline="") as fh:
        w = csv.writer(fh)
        if new:
            w.writerow(["epoch", "step", "L_int", "L_gd", "L_cp", "L_sp", "total"])
        w.writerows(rows)


# -- stage one -------------------------------------------------------------

def pretrain(cfg: TrainConfig, videos: list, log_path=None) -> PretrainResult:
    """Autoencoder-only training with the clusterer fitted on every bottleneck map."""
    if not videos:
        raise data.ManifestError("train split is empty")
    cfg = cfg.for_frame_size(videos[0].frames.shape[-1])
    rngs = _streams(cfg.seed)
    ae_state = ae.init_autoencoder(cfg.ae, rngs["ae_init"])
    som_state = None
    if cfg.use_ac:
        sc = cfg.som
        som_state = som.init_som(sc.L, cfg.ae.feat_channels, rngs["som"], delta0=sc.delta0,
                                 eta0=sc.eta0, k=sc.k, init_scale=sc.init_scale)
    opt = Adam(cfg.beta1, cfg.beta2, cfg.adam_eps)
    weights = dataclasses.replace(cfg.losses, compaction=0.0, separation=0.0)

    def watch(F):
        for fmap in F:
            som.fit_feature_map(fmap, som_state, rngs["som"])

    rows = []
    _, history = _run_epochs(videos, cfg, ae_state, None, opt, rngs["shuffle1"], 0,
                             cfg.stage1_epochs, cfg.stage1_epochs, 0, weights,
                             on_batch=watch if cfg.use_ac else None, log_rows=rows)
    _write_log(log_path, rows)
    result = None
    if som_state is not None and som_state.z_values:
        result = som.export_centers(som_state)
        # checkpoints hold float32; round here so in-memory and reloaded runs agree
        result.centers_ordered = result.centers_ordered.astype(np.float32)
    return PretrainResult(ae_state, result, history, som_state)


# -- stage two -------------------------------------------------------------

def build_dlan(cfg: TrainConfig, ac_result: som.AcResult | None, rng) -> dl.DlanState | None:
    kind, fixed_m = parse_ablation(cfg.ablation)
    D = cfg.ae.feat_channels
    if kind == "no-dlan":
        return None
    if kind in ("no-ac", "fixed-m"):
        m = fixed_m or 10
        return dl.init_random(m, m, D, cfg.alpha, rng)
    if ac_result is None:
        raise ConfigError(f"ablation {cfg.ablation!r} needs a clusterer result from pretraining")
    if kind == "rand-init":
        return dl.init_random(ac_result.L, ac_result.M, D, cfg.alpha, rng)
    if kind == "no-drcs":
        return dl.init_from_ac(ac_result, cfg.alpha, rng, M=ac_result.L)
    return dl.init_from_ac(ac_result, cfg.alpha, rng)


def train(cfg: TrainConfig, videos: list, pre: PretrainResult | tuple, resume: Checkpoint | None = None,
          max_epochs: int | None = None, log_path=None, on_epoch=None) -> TrainResult:
    """Formal training. ``pre`` is left untouched.

    With ``resume`` the run continues from a stage-two checkpoint;
    ``max_epochs`` stops early (the schedule still assumes the full run).
    """
    cfg = cfg.for_frame_size(videos[0].frames.shape[-1])
    ae_pre, ac_result = (pre.ae_state, pre.ac) if isinstance(pre, PretrainResult) else pre
    rngs = _streams(cfg.seed)
    opt = Adam(cfg.beta1, cfg.beta2, cfg.adam_eps)
    if resume is None:
        ae_state = copy.deepcopy(ae_pre)
        dlan_state = build_dlan(cfg, ac_result, rngs["dlan_init"])
        start, step, history = 0, 0, []
        shuffle = rngs["shuffle2"]
    else:
        if resume.meta.get("stage") != "train":
            raise ConfigError("can only resume from a formal-training checkpoint")
        _, ae_state, dlan_state, ac_result = restore(resume)
        start, step = resume.meta["epoch"], resume.meta["step"]
        history = [list(h) for h in resume.meta.get("history", [])]
        opt.load_state(resume.meta["adam_t"], resume.with_prefix(""))
        shuffle = np.random.default_rng()
        shuffle.bit_generator.state = resume.meta["rng"]
    end = cfg.stage2_epochs if max_epochs is None else min(cfg.stage2_epochs, start + max_epochs)
    weights = cfg.losses

    holder = {}

    def snapshot(epoch, step_now, mean_row=None):
        if mean_row is not None:
            history.append(mean_row)
        holder["ck"] = make_checkpoint("train", cfg, ae_state, dlan_state, ac_result, opt,
                                       shuffle, epoch, step_now, history)
        if on_epoch is not None:
            on_epoch(holder["ck"])

    rows = []
    try:
        step, _ = _run_epochs(videos, cfg, ae_state, dlan_state, opt, shuffle, start, end,
                              cfg.stage2_epochs, step, weights, log_rows=rows,
                              on_epoch=snapshot)
    except DivergenceError as exc:
        _write_log(log_path, rows)
        exc.last_good = holder.get("ck")
        raise
    _write_log(log_path, rows)
    if "ck" not in holder:
        snapshot(start, step)
    return TrainResult(ae_state, dlan_state, ac_result, holder["ck"], history)


# -- checkpoints -----------------------------------------------------------

def make_checkpoint(stage: str, cfg: TrainConfig, ae_state, dlan_state=None, ac_result=None,
                    opt: Adam | None = None, rng=None, epoch: int = 0, step: int = 0,
                    history=None) -> Checkpoint:
    tensors = {f"ae.{k}": p.value for k, p in ae_state.params.items()}
    meta = {"format": FORMAT_TAG, "stage": stage, "epoch": epoch, "step": step,
            "config": cfg.to_dict(), "history": history or []}
    if dlan_state is not None:
        tensors.update({k: p.value for k, p in dlan_state.params.items()})
        meta["dlan"] = {"M": dlan_state.M, "L": dlan_state.L, "alpha": dlan_state.alpha}
    if ac_result is not None:
        tensors["ac.centers"] = ac_result.centers_ordered
        meta["ac"] = {"M": ac_result.M, "L": ac_result.L}
    if opt is not None:
        tensors.update(opt.state_tensors())
        meta["adam_t"] = opt.t
    if rng is not None:
        meta["rng"] = rng.bit_generator.state
    return Checkpoint(meta=meta, tensors=tensors)


def restore(ck: Checkpoint):
    """Rebuild ``(cfg, ae_state, dlan_state | None, ac_result | None)`` from a checkpoint."""
    if ck.meta.get("format") != FORMAT_TAG:
        raise ConfigError("checkpoint was not written by this package")
    cfg = TrainConfig.from_dict(ck.meta["config"])
    ae_state = ae.init_autoencoder(cfg.ae, np.random.default_rng(0))
    for name, p in ae_state.params.items():
        p.value = ck.tensors[f"ae.{name}"].copy()
        p.zero_grad()
    dlan_state = None
    if "dlan" in ck.meta:
        info = ck.meta["dlan"]
        t = ck.tensors
        dlan_state = dl.DlanState(
            M=info["M"], alpha=info["alpha"],
            centers=dl.Parameter(t["dlan.centers"].copy()),
            assign_w=dl.Parameter(t["dlan.assign_w"].copy()),
            assign_b=dl.Parameter(t["dlan.assign_b"].copy()),
            proj_w=dl.Parameter(t["dlan.proj_w"].copy()),
            proj_b=dl.Parameter(t["dlan.proj_b"].copy()))
    ac_result = None
    if "ac" in ck.meta:
        ac_result = som.AcResult(M=ck.meta["ac"]["M"], centers_ordered=ck.tensors["ac.centers"].copy())
    return cfg, ae_state, dlan_state, ac_result


def pretrain_checkpoint(cfg: TrainConfig, pre: PretrainResult) -> Checkpoint:
    return make_checkpoint("pretrain", cfg, pre.ae_state, None, pre.ac,
                           epoch=cfg.stage1_epochs, history=pre.history)


def pretrain_from_checkpoint(ck: Checkpoint) -> tuple[TrainConfig, PretrainResult]:
    cfg, ae_state, _, ac_result = restore(ck)
    return cfg, PretrainResult(ae_state, ac_result, ck.meta.get("history", []))


# -- evaluation ------------------------------------------------------------

def score_video(video: data.Video, ae_state, dlan_state=None, batch: int = 32,
                fixed_range: bool = False) -> scoring.VideoScores:
    """PSNR and anomaly score for every frame that has a full 4-frame history."""
    ts = list(range(data.WINDOW, len(video.frames)))
    dtype = ae_state["enc0.w"].value.dtype
    values = []
    for i in range(0, len(ts), batch):
        x, y = data.batch_windows([video], [(0, t) for t in ts[i:i + batch]], dtype)
        pred, _, _ = model.predict(x, ae_state, dlan_state)
        values.extend(scoring.psnr(y[j], pred[j], fixed_range) for j in range(len(x)))
    return scoring.VideoScores(video.id, np.array(values), video.labels[data.WINDOW:],
                               frame_index=np.array(ts))


def evaluate(ae_state, dlan_state, videos: list, report_dir=None,
             fixed_range: bool = False) -> tuple[float, list]:
    """Frame-level AUC over all test videos; optionally writes CSV/SVG/error-map reports."""
    results = [score_video(v, ae_state, dlan_state, fixed_range=fixed_range) for v in videos]
    auc = scoring.frame_auc(results)
    if report_dir is not None:
        write_report(Path(report_dir), results, videos, ae_state, dlan_state, auc)
    return auc, results


def write_report(out: Path, results, videos, ae_state, dlan_state, auc: float) -> None:
    out.mkdir(parents=True, exist_ok=True)
    dtype = ae_state["enc0.w"].value.dtype
    for res, video in zip(results, videos):
        scoring.write_scores_csv(res, out / f"{res.video_id}_scores.csv")
        (out / f"{res.video_id}_scores.svg").write_text(scoring.score_curve_svg(res))
        # error map of the worst-scoring frame, for inspection only
        t = int(res.frame_index[int(np.argmax(res.score))])
        x, y = data.batch_windows([video], [(0, t)], dtype)
        pred, _, _ = model.predict(x, ae_state, dlan_state)
        err = np.abs(pred[0, 0] - y[0, 0]) / 2.0
        data.write_pgm(out / f"{res.video_id}_error_{t:06d}.pgm",
                       np.clip(np.rint(err * 255), 0, 255).astype(np.uint8))
    (out / "summary.txt").write_text(f"frame_auc {auc:.6f}\n")
