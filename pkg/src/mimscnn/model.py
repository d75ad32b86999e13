"""Bag classifier: stem -> multi-scale conv -> MIL pooling -> linear classifier."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import rtf
from .config import ConfigError, ExperimentConfig
from .msconv import MSConvConfig, MSConvLayer
from .nn import BatchNorm2D, Conv2D, Linear, Module, bilinear_resize, max_pool2d
from .pooling import TopKPool, pool_bag
from .tensor import Tensor, concat, log, reduce_max, reduce_mean, relu, scale, sigmoid, sub

INSTANCE_SCHEMES = ("max-inst", "patchcls-mean")


@dataclass
class Bag:
    """Instances ``[c, h, w]`` sharing one binary label."""

    instances: list
    label: int
    id: str = ""

    def __post_init__(self):
        if not self.instances:
            raise ValueError(f"bag {self.id!r}: needs at least one instance")
        self.instances = [np.asarray(x, dtype=np.float32) for x in self.instances]
        shape = self.instances[0].shape
        if len(shape) != 3 or any(x.shape != shape for x in self.instances):
            raise ValueError(f"bag {self.id!r}: instances must share one [c,h,w] shape")
        if self.label not in (0, 1):
            raise ValueError(f"bag {self.id!r}: label must be 0 or 1, got {self.label}")

    def __len__(self) -> int:
        return len(self.instances)

    @property
    def shape(self) -> tuple:
        return self.instances[0].shape


class BackboneStem(Module):
    """Stacked conv3x3 -> batch norm -> relu -> 2x2 max pool blocks."""

    def __init__(self, in_channels: int, channels: Sequence[int], rng: np.random.Generator):
        self.convs, self.norms = [], []
        c = in_channels
        for out in channels:
            self.convs.append(Conv2D(c, out, 3, rng, padding=1, bias=False))
            self.norms.append(BatchNorm2D(out))
            c = out
        self.out_channels = c

    def __call__(self, x: Tensor, record: dict | None = None) -> Tensor:
        for i, (conv, bn) in enumerate(zip(self.convs, self.norms)):
            x = max_pool2d(relu(bn(conv(x))))
            if record is not None:
                record[f"stem.block{i + 1}"] = x
        return x


class MIMSModel(Module):
    def __init__(self, stem: BackboneStem, msconv: MSConvLayer | None, scheme: str,
                 pool: TopKPool | None, rng: np.random.Generator, pyramid: Sequence[float] = ()):
        self.stem = stem
        self.msconv = msconv
        self.pool = pool
        self.scheme = scheme
        self.pyramid = tuple(pyramid)
        n = msconv.channels if msconv is not None else stem.out_channels
        self.classifier = Linear(n, 1, rng)
        self.activations: dict[str, Tensor] = {}

    @property
    def feature_dim(self) -> int:
        return self.classifier.weight.shape[0]

    @property
    def bag_scheme(self) -> str:
        """Pooling used inside one (sub-)bag."""
        return "topk" if self.scheme in INSTANCE_SCHEMES else self.scheme

    # ------------------------------------------------------------------
    def feature_maps(self, x: Tensor, record: dict | None = None) -> list[Tensor]:
        if record is not None:
            record["input"] = x
        primary = self.stem(x, record)
        if record is not None:
            record["stem"] = primary
        if self.msconv is None:
            return [primary]
        return self.msconv(primary)

    def pooled_features(self, groups: Sequence[Sequence[np.ndarray]], record: bool = False) -> Tensor:
        """Pool each group of instances (one bag each) into a row of ``[len(groups), N]``."""
        x = Tensor(np.stack([inst for g in groups for inst in g]), requires_grad=record)
        return self.pooled_features_tensor(x, [len(g) for g in groups], record)

    def pooled_features_tensor(self, x: Tensor, counts: Sequence[int], record: bool = False) -> Tensor:
        """As :meth:`pooled_features`, on stacked instances ``x`` split by ``counts``."""
        rec = {} if record else None
        streams = [self.feature_maps(x, rec)]
        for s in self.pyramid:
            if s != 1.0:
                streams.append(self.feature_maps(bilinear_resize(x, s)))
        if record:
            self.activations = rec
        starts = np.concatenate([[0], np.cumsum(counts)])
        rows = []
        for b in range(len(counts)):
            lo, hi = int(starts[b]), int(starts[b + 1])
            maps = [m if len(counts) == 1 else m[lo:hi] for stream in streams for m in stream]
            rows.append(pool_bag(maps, self.bag_scheme, self.pool).reshape(1, -1))
        return rows[0] if len(rows) == 1 else concat(rows, axis=0)

    def instance_logits(self, bags: Sequence[Bag], record: bool = False) -> Tensor:
        groups = [[inst] for bag in bags for inst in bag.instances]
        return self.classifier(self.pooled_features(groups, record)).reshape(-1)

    def bag_logits(self, bags: Sequence[Bag], record: bool = False) -> Tensor:
        """One logit per bag. Instance-level schemes are folded into a logit too."""
        if self.scheme not in INSTANCE_SCHEMES:
            feats = self.pooled_features([b.instances for b in bags], record)
            return self.classifier(feats).reshape(-1)
        inst = self.instance_logits(bags, record)
        starts = np.concatenate([[0], np.cumsum([len(b) for b in bags])])
        out = []
        for b in range(len(bags)):
            out.append(self.fold_instances(inst[int(starts[b]):int(starts[b + 1])]).reshape(1))
        return out[0] if len(out) == 1 else concat(out, axis=0)

    def fold_instances(self, logits: Tensor) -> Tensor:
        """Scalar bag logit from the instance logits of one bag."""
        if self.scheme == "max-inst":
            return reduce_max(logits)
        # logit of the mean probability, kept finite
        p = scale(reduce_mean(sigmoid(logits)), 1 - 2e-6) + 1e-6
        return sub(log(p), log(1 - p))


def model_forward(model: MIMSModel, bag: Bag, record: bool = False) -> tuple[Tensor, Tensor]:
    """Bag logit (scalar) and the pooled ``[N]`` feature vector."""
    try:
        if model.scheme in INSTANCE_SCHEMES:
            feats = model.pooled_features([[inst] for inst in bag.instances], record)
            inst = model.classifier(feats).reshape(-1)
            logit = model.fold_instances(inst).reshape(())
            i = int(np.argmax(inst.data))
            feature = feats[i] if model.scheme == "max-inst" else reduce_mean(feats, axis=0)
            return logit, feature
        feats = model.pooled_features([bag.instances], record)
        return model.classifier(feats).reshape(()), feats.reshape(-1)
    except ValueError as exc:
        raise type(exc)(f"bag {bag.id!r}: {exc}") from exc


def model_forward_instancewise(model: MIMSModel, bag: Bag) -> list[float]:
    """Sigmoid output of the model applied to each instance as its own bag."""
    logits = model.instance_logits([bag]).data.astype(np.float64)
    return [float(v) for v in 1.0 / (1.0 + np.exp(-logits))]


def msconv_config_for(cfg: ExperimentConfig) -> MSConvConfig | None:
    groups = [tuple(g) for g in cfg.kernel_groups]
    scales = [float(s) for s in cfg.scales]
    if cfg.variant == "mims":
        return MSConvConfig(scales, groups, True, True)
    if cfg.variant in ("mims-noresizing", "pyramid-input"):
        return MSConvConfig([1.0], groups, True, True)
    if cfg.variant == "si-cnn":
        return MSConvConfig(scales, groups, False, False)
    if cfg.variant == "mi-pre-conv":
        return MSConvConfig([1.0], groups, False, False)
    if cfg.variant == "mi-pre":
        return None
    raise ConfigError(f"unknown variant {cfg.variant!r}")


def build_model(cfg: ExperimentConfig) -> MIMSModel:
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    stem = BackboneStem(cfg.in_channels, cfg.stem_channels, rng)
    msc = msconv_config_for(cfg)
    msconv = MSConvLayer(stem.out_channels, msc, rng) if msc is not None else None
    needs_topk = cfg.pool in ("topk", "max-inst", "patchcls-mean")
    pool = TopKPool(cfg.k, cfg.decay) if needs_topk else None
    pyramid = cfg.pyramid_scales if cfg.variant == "pyramid-input" else ()
    model = MIMSModel(stem, msconv, cfg.pool, pool, rng, pyramid)
    for name, p in model.named_parameters():
        p.name = name
        p.lr_scale = cfg.backbone_lr_factor if name.startswith("stem.") else 1.0
    return model


# ---------------------------------------------------------------------------
# checkpoints: params.bin holds back-to-back RTF records, index.json maps
# name -> {offset, nbytes, shape, kind}


def save_checkpoint(model: MIMSModel, cfg: ExperimentConfig, directory) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    index, blobs, offset = {}, [], 0
    entries = [(n, p.data, "param") for n, p in model.named_parameters()]
    entries += [(n, b, "buffer") for n, b in model.named_buffers()]
    for name, arr, kind in entries:
        blob = rtf.encode(arr)
        index[name] = {"offset": offset, "nbytes": len(blob), "shape": list(arr.shape), "kind": kind}
        blobs.append(blob)
        offset += len(blob)
    (d / "params.bin").write_bytes(b"".join(blobs))
    (d / "index.json").write_text(json.dumps(index, indent=2, sort_keys=True))
    (d / "config.json").write_text(cfg.to_json())
    return d


def load_checkpoint(directory) -> tuple[MIMSModel, ExperimentConfig]:
    d = Path(directory)
    for name in ("params.bin", "index.json", "config.json"):
        if not (d / name).exists():
            raise FileNotFoundError(f"checkpoint {d}: missing {name}")
    cfg = ExperimentConfig.load(d / "config.json")
    model = build_model(cfg)
    index = json.loads((d / "index.json").read_text())
    blob = (d / "params.bin").read_bytes()
    targets = dict(model.named_parameters())
    buffers = dict(model.named_buffers())
    for name, meta in index.items():
        arr = rtf.decode(blob[meta["offset"]:meta["offset"] + meta["nbytes"]], f"{d}/params.bin:{name}")
        dest = targets[name].data if meta["kind"] == "param" else buffers[name]
        if dest.shape != arr.shape:
            raise ValueError(f"checkpoint {d}: {name} has shape {arr.shape}, model expects {dest.shape}")
        dest[...] = arr
    missing = (set(targets) | set(buffers)) - set(index)
    if missing:
        raise ValueError(f"checkpoint {d}: missing entries {sorted(missing)}")
    model.eval()
    return model, cfg
