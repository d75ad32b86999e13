"""Seeded synthetic bags: rings (positive pattern) and disks (distractors)
of varying size on a noisy background, with bag-level labels only.

Reproducibility rules
---------------------
* Random numbers come from a counter-based SplitMix64: the ``i``-th draw of
  a stream with key ``K`` is ``mix(K + (i + 1) * 0x9E3779B97F4A7C15 mod 2**64)``
  where ``mix`` is the SplitMix64 finalizer.
* Stream keys are derived with ``derive(key, v) = mix(key ^ mix(v + GOLDEN))``;
  the root key is ``mix(seed)``, then split tag, then bag index, then a
  purpose tag (``0`` structure, ``1000 + i`` noise of instance ``i``).
* A uniform is ``(u >> 11) * 2**-53``. Pixel noise is Irwin-Hall:
  ``sqrt(3) * (u1 + u2 + u3 + u4 - 2)``, all in float64, then multiplied
  by ``noise_sigma`` and rounded to float32 (round to nearest even).
* Shapes are rasterized on the integer pixel grid: a pixel ``(y, x)`` is
  inside a disk of radius ``R`` centred at integer ``(cy, cx)`` iff
  ``(y-cy)**2 + (x-cx)**2 <= R*R``; a ring additionally requires
  ``> (0.5 R)**2``.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import rtf
from .model import Bag

GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
RING_INNER = 0.5
SCALE_BINS = ((0.5, 0.8), (0.8, 1.25), (1.25, 2.0))
SPLIT_TAGS = {"train": 1, "test": 2, "probe": 3}


def mix64(z):
    z = np.asarray(z, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * _M1
        z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def derive(key, value: int) -> np.uint64:
    with np.errstate(over="ignore"):
        return np.uint64(mix64(np.uint64(key) ^ mix64(np.uint64(value) + GOLDEN)))


class CounterRNG:
    """Sequential reader over one SplitMix64 counter stream."""

    def __init__(self, key):
        self.key = np.uint64(key)
        self.counter = 0

    def u64(self, n: int) -> np.ndarray:
        idx = np.arange(self.counter + 1, self.counter + 1 + n, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            return mix64(self.key + idx * GOLDEN)

    def uniform(self, n: int | None = None):
        u = (self.u64(1 if n is None else n) >> np.uint64(11)).astype(np.float64) * 2.0 ** -53
        return float(u[0]) if n is None else u

    def integer(self, lo: int, hi: int) -> int:
        """Uniform integer in ``[lo, hi]``."""
        return lo + min(int(self.uniform() * (hi - lo + 1)), hi - lo)

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.u64(n), kind="stable")

    def normal(self, n: int) -> np.ndarray:
        u = self.uniform(4 * n).reshape(4, n)
        return math.sqrt(3.0) * (((u[0] + u[1]) + u[2]) + u[3] - 2.0)


@dataclass
class SyntheticSpec:
    image_size: tuple = (64, 64)
    instances_per_bag: tuple = (4, 8)
    roi_base_radius: float = 6.0
    roi_scale_range: tuple = (0.5, 2.0)
    distractors_per_instance: tuple = (1, 2)
    intensity_range: tuple = (0.6, 1.0)
    positive_shape: str = "ring"
    distractor_shape: str = "disk"
    noise_sigma: float = 0.1
    n_bags: int = 200
    positive_fraction: float = 0.5
    stratify_scales: bool = False

    def validate(self) -> "SyntheticSpec":
        h, w = self.image_size
        lo, hi = self.roi_scale_range
        if not 0 < lo <= hi:
            raise ValueError(f"roi_scale_range {self.roi_scale_range} invalid")
        r_max = self.roi_base_radius * hi
        if 2 * math.ceil(r_max) + 3 > min(h, w):
            raise ValueError(f"ROI radius {r_max} does not fit in a {h}x{w} image")
        a, b = self.instances_per_bag
        if not 1 <= a <= b:
            raise ValueError(f"instances_per_bag {self.instances_per_bag} invalid")
        if not 0 <= self.positive_fraction <= 1 or self.n_bags < 0:
            raise ValueError("positive_fraction must be in [0,1] and n_bags >= 0")
        if self.positive_shape != "ring" or self.distractor_shape != "disk":
            raise ValueError("only ring positives and disk distractors are supported")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        d = dict(d)
        for key in ("image_size", "instances_per_bag", "roi_scale_range", "distractors_per_instance",
                    "intensity_range"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d).validate()


def _paint(img: np.ndarray, cy: int, cx: int, radius: float, value: float, ring: bool) -> None:
    h, w = img.shape
    yy, xx = np.mgrid[0:h, 0:w]
    d2 = (yy - cy) ** 2 + (xx - cx) ** 2
    mask = d2 <= radius * radius
    if ring:
        mask &= d2 > (RING_INNER * radius) ** 2
    img[mask] = value


def _place(rng: CounterRNG, radius: float, size: tuple, taken: list, tries: int = 20):
    """Integer centre keeping the shape inside the image and clear of ``taken``."""
    h, w = size
    m = math.ceil(radius) + 1
    for _ in range(tries):
        cy, cx = rng.integer(m, h - 1 - m), rng.integer(m, w - 1 - m)
        if all((cy - y) ** 2 + (cx - x) ** 2 > (radius + r + 2) ** 2 for y, x, r in taken):
            return cy, cx
    return None


def _roi_scale(spec: SyntheticSpec, rng: CounterRNG, roi_counter: int) -> float:
    lo, hi = spec.roi_scale_range
    if spec.stratify_scales:
        blo, bhi = SCALE_BINS[roi_counter % len(SCALE_BINS)]
        lo, hi = max(lo, blo), min(hi, bhi)
    return lo + (hi - lo) * rng.uniform()


def generate_bag(spec: SyntheticSpec, key, label: int, bag_id: str, roi_counter: int = 0):
    """One bag and its ground-truth record."""
    rng = CounterRNG(derive(key, 0))
    h, w = spec.image_size
    n_inst = rng.integer(*spec.instances_per_bag)
    roi_slices: list[int] = []
    if label == 1:
        n_roi = rng.integer(1, min(3, n_inst))
        roi_slices = sorted(int(i) for i in rng.permutation(n_inst)[:n_roi])
    lo_i, hi_i = spec.intensity_range
    lo_s, hi_s = spec.roi_scale_range
    instances, rois = [], []
    for i in range(n_inst):
        img = np.zeros((h, w), dtype=np.float64)
        taken = []
        if i in roi_slices:
            s = _roi_scale(spec, rng, roi_counter)
            roi_counter += 1
            r = spec.roi_base_radius * s
            cy, cx = _place(rng, r, (h, w), [])
            _paint(img, cy, cx, r, lo_i + (hi_i - lo_i) * rng.uniform(), ring=True)
            taken.append((cy, cx, r))
            fr = math.floor(r)
            rois.append({"instance": i, "center": [cy, cx], "scale": s, "radius": r,
                         "bbox": [cy - fr, cx - fr, cy + fr, cx + fr]})
        for _ in range(rng.integer(*spec.distractors_per_instance)):
            r = spec.roi_base_radius * (lo_s + (hi_s - lo_s) * rng.uniform())
            value = lo_i + (hi_i - lo_i) * rng.uniform()
            spot = _place(rng, r, (h, w), taken)
            if spot is not None:
                _paint(img, spot[0], spot[1], r, value, ring=False)
                taken.append((spot[0], spot[1], r))
        noise = CounterRNG(derive(key, 1000 + i)).normal(h * w).reshape(h, w)
        instances.append((img + spec.noise_sigma * noise).astype(np.float32)[None])
    return Bag(instances, label, bag_id), {"label": label, "rois": rois}, roi_counter


def generate(spec: SyntheticSpec, seed: int, split: str = "train"):
    """Return ``(bags, truth, manifest)`` for one split; a pure function of its arguments.

    Exactly ``round(n_bags * positive_fraction)`` bags are positive; which
    ones is decided by a seeded permutation.
    """
    spec.validate()
    root = derive(mix64(np.uint64(seed)), SPLIT_TAGS.get(split, 0))
    n_pos = int(math.floor(spec.n_bags * spec.positive_fraction + 0.5))
    order = CounterRNG(derive(root, 0xFFFF_FFFF)).permutation(spec.n_bags)
    labels = np.zeros(spec.n_bags, dtype=int)
    labels[order[:n_pos]] = 1
    bags, truth, manifest = [], {}, []
    roi_counter = 0
    for i in range(spec.n_bags):
        bag_id = f"{split}{i:04d}"
        bag, gt, roi_counter = generate_bag(spec, derive(root, i), int(labels[i]), bag_id, roi_counter)
        bags.append(bag)
        truth[bag_id] = gt
        manifest += [(bag_id, f"instances/{bag_id}_{j}.rtf", bag.label) for j in range(len(bag))]
    return bags, truth, manifest


def scale_bin(scale: float) -> int:
    for i, (lo, hi) in enumerate(SCALE_BINS):
        if lo <= scale < hi:
            return i
    return len(SCALE_BINS) - 1


# ---------------------------------------------------------------------------
# on-disk layout: <dir>/manifest.csv, <dir>/truth.json, <dir>/instances/*.rtf


def save_dataset(bags, truth: dict, directory) -> Path:
    d = Path(directory)
    (d / "instances").mkdir(parents=True, exist_ok=True)
    with (d / "manifest.csv").open("w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["bag_id", "instance_path", "label"])
        for bag in bags:
            for j, inst in enumerate(bag.instances):
                rel = f"instances/{bag.id}_{j}.rtf"
                rtf.save(d / rel, inst)
                wr.writerow([bag.id, rel, bag.label])
    (d / "truth.json").write_text(json.dumps(truth, indent=1, sort_keys=True))
    return d


def load_dataset(path):
    """Load ``(bags, truth)`` from a split directory or its ``manifest.csv``."""
    p = Path(path)
    d = p.parent if p.name == "manifest.csv" else p
    manifest = d / "manifest.csv"
    if not manifest.exists():
        raise FileNotFoundError(f"{manifest}: manifest not found")
    rows: dict[str, list] = {}
    labels: dict[str, int] = {}
    with manifest.open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["bag_id", "instance_path", "label"]:
            raise ValueError(f"{manifest}: expected columns bag_id,instance_path,label")
        for n, row in enumerate(reader, start=2):
            if row["label"] not in ("0", "1"):
                raise ValueError(f"{manifest}:{n}: label must be 0 or 1, got {row['label']!r}")
            label = int(row["label"])
            if labels.setdefault(row["bag_id"], label) != label:
                raise ValueError(f"{manifest}:{n}: inconsistent label for bag {row['bag_id']}")
            f = d / row["instance_path"]
            if not f.exists():
                raise FileNotFoundError(f"{f}: instance file missing")
            rows.setdefault(row["bag_id"], []).append(rtf.load(f))
    bags = [Bag(insts, labels[bid], bid) for bid, insts in rows.items()]
    truth_path = d / "truth.json"
    truth = json.loads(truth_path.read_text()) if truth_path.exists() else {}
    return bags, truth


def write_benchmark(directory, seed: int, n_train: int = 400, n_test: int = 200,
                    spec: SyntheticSpec | None = None) -> Path:
    """Generate and save ``train/`` and ``test/`` splits plus ``spec.json``."""
    spec = spec or SyntheticSpec()
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for split, n in (("train", n_train), ("test", n_test)):
        s = SyntheticSpec(**{**asdict(spec), "n_bags": n})
        bags, truth, _ = generate(s, seed, split)
        save_dataset(bags, truth, d / split)
    meta = {"seed": seed, "n_train": n_train, "n_test": n_test, "spec": asdict(spec)}
    (d / "spec.json").write_text(json.dumps(meta, indent=1, sort_keys=True))
    return d


def benchmark(seed: int = 0, n_train: int = 400, n_test: int = 200, spec: SyntheticSpec | None = None):
    """In-memory equivalent of :func:`write_benchmark`: ``(train, test, test_truth)``."""
    spec = spec or SyntheticSpec()
    train, _, _ = generate(SyntheticSpec(**{**asdict(spec), "n_bags": n_train}), seed, "train")
    test, truth, _ = generate(SyntheticSpec(**{**asdict(spec), "n_bags": n_test}), seed, "test")
    return train, test, truth
