"""1D Grad-CAM saliency for the ECG classifier."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass

import numpy as np

from .dataio import CLASS_NAMES, LEAD_NAMES


@dataclass
class SaliencyMap:
    record_id: str
    target_class: int
    layer: str
    importance: np.ndarray  # [L], values in [0, 1]
    no_positive_attribution: bool = False
    score: float = 0.0  # the target logit

    def __post_init__(self):
        self.importance = np.asarray(self.importance, dtype=np.float64)

    def to_json(self) -> dict:
        return {
            "record_id": self.record_id,
            "target_class": int(self.target_class),
            "target_name": CLASS_NAMES[self.target_class],
            "layer": self.layer,
            "no_positive_attribution": self.no_positive_attribution,
            "score": float(self.score),
            "importance": self.importance.tolist(),
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True)


def upsample_linear(h: np.ndarray, length: int) -> np.ndarray:
    """Linear interpolation of a coarse map onto ``length`` samples, aligning cell centres."""
    t_coarse = h.shape[-1]
    if t_coarse == length:
        return h.astype(np.float64)
    centres = (np.arange(t_coarse) + 0.5) * (length / t_coarse) - 0.5
    return np.interp(np.arange(length), centres, h)


def cam_from_gradients(acts: np.ndarray, grads: np.ndarray, length: int) -> tuple[np.ndarray, bool]:
    """Heatmap from one sample's activations and gradients ``[C, T]``.

    Returns ``(importance, no_positive)``; the map is all zeros when the
    weighted sum never goes positive.
    """
    acts = np.asarray(acts, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if acts.shape != grads.shape or acts.ndim != 2:
        raise ValueError("activations and gradients must both be [C, T]")
    weights = grads.mean(axis=1)
    cam = np.maximum(weights @ acts, 0.0)
    if not cam.max(initial=0.0) > 0:
        return np.zeros(length), True
    # normalise after interpolation: coarse peaks fall between output samples
    up = upsample_linear(cam, length)
    peak = up.max(initial=0.0)
    if not peak > 0:
        return np.zeros(length), True
    return np.clip(up / peak, 0.0, 1.0), False


def grad_cam(model, x: np.ndarray, target_class: int | None = None, layer: str | None = None,
             record_id: str = "") -> SaliencyMap:
    """Grad-CAM of the pre-softmax logit for one preprocessed window ``[leads, L]``.

    ``model`` needs ``forward(x, mode="eval", capture=True) -> (logits, acts)``;
    ``target_class`` defaults to the predicted class and ``layer`` to the
    model's deepest convolution.
    """
    x = np.asarray(x)
    if x.ndim != 2:
        raise ValueError("grad_cam takes a single window [leads, L]")
    if layer is None:
        layer = model.default_cam_layer
        if callable(layer):
            layer = layer()
    conv_layers = getattr(model, "conv_layers", None)
    if conv_layers is not None and layer not in conv_layers():
        raise ValueError(f"{layer!r} is not a convolutional layer of this model")
    logits, acts = model.forward(x[None], mode="eval", capture=True)
    if layer not in acts:
        raise ValueError(f"layer {layer!r} was not captured")
    a = acts[layer]
    a.retain_grad()
    n_classes = logits.shape[1]
    if target_class is None:
        target_class = int(np.argmax(logits.data[0]))
    if not 0 <= target_class < n_classes:
        raise ValueError(f"target class must lie in 0..{n_classes - 1}")
    score = logits[0, target_class]
    score.backward()
    grads = a.grad if a.grad is not None else np.zeros_like(a.data)
    store = getattr(model, "store", None)
    if store is not None:
        store.zero_grad()
    importance, empty = cam_from_gradients(a.data[0], grads[0], x.shape[-1])
    return SaliencyMap(record_id, int(target_class), layer, importance, empty, float(score.data))


def export_overlay(smap: SaliencyMap, leads: np.ndarray, lead_selection=None, fs: float = 500.0) -> str:
    """CSV text: header then one row per sample ``t, <selected leads>, importance``."""
    leads = np.asarray(leads)
    if leads.shape[-1] != smap.importance.size:
        raise ValueError(f"length mismatch: signal {leads.shape[-1]} vs map {smap.importance.size}")
    if lead_selection is None:
        lead_selection = list(range(leads.shape[0]))
    idx = [LEAD_NAMES.index(s) if isinstance(s, str) else int(s) for s in lead_selection]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["t", *(LEAD_NAMES[i] for i in idx), "importance"])
    cols = leads[idx].astype(np.float64)
    for t in range(leads.shape[-1]):
        w.writerow([f"{t / fs:.6f}", *(f"{v:.6g}" for v in cols[:, t]), f"{smap.importance[t]:.6f}"])
    return buf.getvalue()
