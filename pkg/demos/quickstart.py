"""Train a small detector on generated clips and look at what it learned.

Runs in about a minute on one core:

    python demos/quickstart.py [workdir]
"""
import sys
import tempfile
from pathlib import Path

from dlanac import autoencoder as ae
from dlanac import data, model
from dlanac import dlan as dl
from dlanac import training as tr


def main(workdir: Path) -> None:
    manifest = data.generate_synthetic(data.preset("small", seed=3), workdir / "clips")
    train, test = data.load_split(manifest, "train"), data.load_split(manifest, "test")
    print(f"{len(train)} normal clips, {len(test)} test clips of {manifest.frame_size}px")

    cfg = tr.TrainConfig(stage1_epochs=3, stage2_epochs=6, seed=3,
                         ae=ae.AeConfig(frame_size=manifest.frame_size))
    pre = tr.pretrain(cfg, train)
    print(f"stage one: loss {pre.history[0][-1]:.4f} -> {pre.history[-1][-1]:.4f}, "
          f"clusterer settled on M={pre.ac.M} of L={pre.ac.L}")

    res = tr.train(cfg, train, pre)
    print(f"stage two: loss {res.history[0][-1]:.4f} -> {res.history[-1][-1]:.4f}")

    auc, per_video = tr.evaluate(res.ae_state, res.dlan_state, test, report_dir=workdir / "report")
    print(f"frame AUC {auc:.3f}; per-clip reports in {workdir / 'report'}")
    for v in per_video:
        normal, odd = v.score[v.labels == 0], v.score[v.labels == 1]
        print(f"  {v.video_id}: mean score normal {normal.mean():.2f}, anomalous {odd.mean():.2f}")

    # how sharply do the bottleneck features pick a prototype?
    x, _ = data.batch_windows(test, [(0, t) for t in range(data.WINDOW, 20)])
    _, F, _ = model.predict(x, res.ae_state, res.dlan_state)
    _, _, w, _ = dl.forward(F, res.dlan_state)
    print(f"mean top matching weight {w.max(-1).mean():.2f} (uniform would be {1 / res.dlan_state.M:.2f})")


if __name__ == "__main__":
    if len(sys.argv) > 1:
        main(Path(sys.argv[1]))
    else:
        with tempfile.TemporaryDirectory() as tmp:
            main(Path(tmp))
