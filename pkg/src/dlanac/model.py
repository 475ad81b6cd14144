"""Encoder -> (prototype fusion) -> decoder, plus the loss/gradient step."""
from __future__ import annotations

import numpy as np

from . import autoencoder as ae
from . import diffcore as dc
from . import dlan as dl
from . import losses


def predict(window: np.ndarray, state: ae.AeState, dlan_state: dl.DlanState | None = None):
    """Predicted next frame, bottleneck map and prototype read-out.

    Without a DLAN the bottleneck is fused with itself so the decoder
    arity does not change; the read-out is then ``None``.
    """
    x = np.asarray(window)
    single = x.ndim == 3
    xb = x[None] if single else x
    F, skips, _ = ae.encode_forward(xb, state)
    if dlan_state is None:
        Pt = None
        fused = dc.channel_concat(F, F)
    else:
        Pt, _, _, _ = dl.forward(F, dlan_state)
        fused = dl.fuse(F, Pt)
    pred, _ = ae.decode_forward(fused, skips, state)
    if single:
        return pred[0], F[0], None if Pt is None else Pt[0]
    return pred, F, Pt


def loss_and_grad(windows: np.ndarray, targets: np.ndarray, state: ae.AeState,
                  dlan_state: dl.DlanState | None, weights: losses.LossWeights,
                  ) -> tuple[losses.LossReport, np.ndarray]:
    """Forward a batch, compute the weighted loss and accumulate all parameter gradients.

    Returns the loss report and the bottleneck maps of the batch. Gradients
    add onto whatever is already stored; call ``zero_grad`` first.
    """
    F, skips, enc_cache = ae.encode_forward(windows, state)
    D = F.shape[1]
    if dlan_state is None:
        fused = dc.channel_concat(F, F)
    else:
        Pt, P, w, dcache = dl.forward(F, dlan_state)
        fused = dl.fuse(F, Pt)
    pred, dec_cache = ae.decode_forward(fused, skips, state)

    targets = np.asarray(targets, dtype=pred.dtype)
    l_int, g_int = losses.intensity_loss(pred, targets)
    l_gd, g_gd = losses.gradient_loss(pred, targets)
    parts = {"intensity": l_int, "gradient": l_gd}
    if dlan_state is not None:
        f = dl.to_rows(F)
        l_cp, df_cp, dP_cp = losses.compaction_loss(f, P, w)
        l_sp, df_sp, dP_sp = losses.separation_loss(f, P, w, weights.margin)
        parts.update(compaction=l_cp, separation=l_sp)
    report = losses.total_loss(parts, weights)

    dpred = weights.intensity * g_int + weights.gradient * g_gd
    dfused, dskips = ae.decode_backward(dpred.astype(pred.dtype, copy=False), dec_cache, state)
    dF_a, dF_b = dc.channel_concat_backward(dfused, D)
    if dlan_state is None:
        dF = dF_a + dF_b
    else:
        df_extra = weights.compaction * df_cp + weights.separation * df_sp
        dP_extra = weights.compaction * dP_cp + weights.separation * dP_sp
        dF = dF_a + dl.backward(dF_b, dcache, dlan_state, dP_extra=dP_extra, df_extra=df_extra)
    ae.encode_backward(dF, dskips, enc_cache, state)
    return report, F
