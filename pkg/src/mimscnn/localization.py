"""Gradient-times-input heatmaps for instances the classifier calls positive.

The class score (the bag logit for class 1, its negation for class 0) is
backpropagated to a recorded activation. Multiplying gradient and
activation and summing over channels gives a signed contribution map,
which is rectified, scaled to 0..255, upsampled to the slice and blended
with it.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import Bag, MIMSModel, model_forward, model_forward_instancewise
from .nn import resize_to
from .tensor import Tensor, backward, no_grad


@dataclass
class ContributionMap:
    T: np.ndarray
    P: np.ndarray
    source_layer: str


@dataclass
class HeatmapOverlay:
    P_star: np.ndarray
    H: np.ndarray
    rgb: np.ndarray | None = field(default=None, repr=False)


def _round_half_up(v: np.ndarray) -> np.ndarray:
    return np.floor(v + 0.5)


def quantize_rectify(T) -> np.ndarray:
    """Clip negatives, map the largest positive value to 255, round half up."""
    t = np.maximum(np.asarray(T, dtype=np.float64), 0.0)
    top = t.max() if t.size else 0.0
    if top <= 0:
        return np.zeros(t.shape, dtype=np.int64)
    return np.clip(_round_half_up(t * 255.0 / top), 0, 255).astype(np.int64)


def contribution_map(model: MIMSModel, bag: Bag, instance_index: int, layer: str = "stem",
                     target_class: int = 1) -> ContributionMap:
    """Channel-summed gradient x activation of one instance at ``layer``.

    The backward pass is seeded so that the objective is the score of
    ``target_class``. ``layer`` names a recorded activation: ``input``,
    ``stem.block<i>`` or ``stem``.
    """
    if not 0 <= instance_index < len(bag):
        raise IndexError(f"bag {bag.id!r} has {len(bag)} instances, asked for {instance_index}")
    if target_class not in (0, 1):
        raise ValueError(f"target class must be 0 or 1, got {target_class}")
    model.eval()
    logit, _ = model_forward(model, bag, record=True)
    acts = model.activations
    if layer not in acts:
        raise KeyError(f"unknown layer {layer!r}; recorded layers are {sorted(acts)}")
    seed = np.full(logit.shape, 1.0 if target_class == 1 else -1.0, dtype=logit.dtype)
    backward(logit, seed)
    act = acts[layer]
    grad = act.grad if act.grad is not None else np.zeros_like(act.data)
    x = act.data[instance_index].astype(np.float64)
    d = grad[instance_index].astype(np.float64)
    T = (d * x).sum(axis=0)
    model.activations = {}
    return ContributionMap(T, quantize_rectify(T), layer)


def upsample_overlay(P, R) -> HeatmapOverlay:
    """Resize ``P`` onto the slice grid and blend: ``H = 0.6 R + 0.3 P*``.

    ``R`` is the slice as 0..255 grey levels. Both ``P*`` and ``H`` are
    rounded half up and clamped to 0..255.
    """
    P = np.asarray(P, dtype=np.float64)
    R = np.asarray(R)
    if P.ndim != 2 or R.ndim != 2:
        raise ValueError("upsample_overlay: P and R must be 2-D")
    if R.shape[0] < P.shape[0] or R.shape[1] < P.shape[1]:
        raise ValueError(f"upsample_overlay: slice {R.shape} is smaller than map {P.shape}")
    with no_grad():
        up = resize_to(Tensor(P[None, None].astype(np.float32)), R.shape[0], R.shape[1]).data[0, 0]
    p_star = np.clip(_round_half_up(up.astype(np.float64)), 0, 255).astype(np.int64)
    r = np.clip(np.asarray(R, dtype=np.int64), 0, 255)
    # integer form of round_half_up(0.6 r + 0.3 p*)
    H = np.clip((6 * r + 3 * p_star + 5) // 10, 0, 255)
    dim = (6 * r + 5) // 10
    rgb = np.stack([H, dim, dim], axis=-1)
    return HeatmapOverlay(p_star, H, rgb)


def slice_grey(image: np.ndarray) -> np.ndarray:
    """Grey levels of a ``[c, h, w]`` slice: channel mean clipped to [0, 1] times 255."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3:
        img = img.mean(axis=0)
    return _round_half_up(np.clip(img, 0.0, 1.0) * 255.0).astype(np.int64)


def write_pgm(path, image: np.ndarray) -> None:
    img = np.asarray(image, dtype=np.uint8)
    Path(path).write_bytes(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode() + img.tobytes())


def write_ppm(path, image: np.ndarray) -> None:
    img = np.asarray(image, dtype=np.uint8)
    Path(path).write_bytes(f"P6\n{img.shape[1]} {img.shape[0]}\n255\n".encode() + img.tobytes())


def read_pnm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    magic, dims, maxval, body = raw.split(b"\n", 3)
    w, h = (int(v) for v in dims.split())
    shape = (h, w, 3) if magic == b"P6" else (h, w)
    return np.frombuffer(body, dtype=np.uint8).reshape(shape)


def localize_bag(model: MIMSModel, bag: Bag, target_class: int = 1, out_dir=None,
                 layer: str = "stem", color: bool = False) -> list[dict]:
    """Heatmaps for every instance whose own probability of ``target_class`` exceeds 0.5.

    Each instance is scored as a one-instance bag, and its heatmap explains
    that same one-instance decision. Inside the full bag, top-k pooling can
    route all gradient to other instances. With ``out_dir`` set,
    ``<bag>_s<i>_heat.pgm`` and ``<bag>_s<i>_overlay.pgm`` are written per
    selected instance (plus a red-channel ``_overlay.ppm`` when ``color``).
    """
    model.eval()
    with no_grad():
        probs = model_forward_instancewise(model, bag)
    if target_class == 0:
        probs = [1.0 - p for p in probs]
    out = []
    for i, p in enumerate(probs):
        if p <= 0.5:
            continue
        cmap = contribution_map(model, Bag([bag.instances[i]], bag.label, bag.id), 0, layer, target_class)
        overlay = upsample_overlay(cmap.P, slice_grey(bag.instances[i]))
        item = {"instance": i, "probability": p, "map": cmap, "overlay": overlay, "files": []}
        if out_dir is not None:
            d = Path(out_dir)
            d.mkdir(parents=True, exist_ok=True)
            stem = f"{bag.id or 'bag'}_s{i}"
            write_pgm(d / f"{stem}_heat.pgm", overlay.P_star)
            write_pgm(d / f"{stem}_overlay.pgm", overlay.H)
            item["files"] = [d / f"{stem}_heat.pgm", d / f"{stem}_overlay.pgm"]
            if color:
                write_ppm(d / f"{stem}_overlay.ppm", overlay.rgb)
                item["files"].append(d / f"{stem}_overlay.ppm")
        out.append(item)
    return out


def heatmap_peak(overlay: HeatmapOverlay) -> tuple[int, int]:
    """Row and column of the first maximum of ``P*``."""
    return tuple(int(v) for v in np.unravel_index(np.argmax(overlay.P_star), overlay.P_star.shape))
