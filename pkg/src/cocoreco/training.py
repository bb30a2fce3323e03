"""Composite objective, optimisation loop, metrics and checkpoints."""
from __future__ import annotations

import contextlib
import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .cab import CabConfig, minibatch_alignment_loss
from .connectome import parse_connectome
from .data import DatasetIndex, standardize
from .model import ModelState, build_variant, forward
from .tensor import Tape, Tensor, add, backward, scale_channels, softmax_cross_entropy

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
MANIFEST = "manifest.json"
BLOB = "params.bin"


class CheckpointError(ValueError):
    """Checkpoint is truncated, from another version, or built from another spec."""


class DivergenceError(FloatingPointError):
    """Training loss became non-finite."""


@dataclass
class TrainConfig:
    image_size: int = 64
    batch_size: int = 32
    epochs: int = 20
    lr: float = 1e-3
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    momentum: float = 0.9
    lambda_mb: float = 1.0
    seed: int = 0
    eps_cab: float = 1e-8
    orientation: str = "causes"

    def __post_init__(self):
        for name in ("image_size", "batch_size", "lr"):
            if not getattr(self, name) > 0:
                raise ValueError(f"TrainConfig.{name} must be positive")
        if self.epochs < 0 or self.lambda_mb < 0:
            raise ValueError("TrainConfig.epochs and lambda_mb must be non-negative")
        if self.optimizer not in ("adam", "sgd_momentum"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        CabConfig(self.eps_cab, self.orientation)

    @property
    def cab(self) -> CabConfig:
        return CabConfig(self.eps_cab, self.orientation)

    @classmethod
    def from_json(cls, text: str) -> "TrainConfig":
        raw = json.loads(text)
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown training config fields: {sorted(unknown)}")
        return cls(**raw)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    def config_hash(self) -> str:
        return hashlib.sha256(self.to_json().encode("utf-8")).hexdigest()


@contextlib.contextmanager
def thread_limit(n: Optional[int] = None):
    """Cap BLAS threads; ``COCORECO_THREADS`` of 0 or 1 means single-threaded."""
    if n is None:
        env = os.environ.get("COCORECO_THREADS")
        n = int(env) if env else None
    if n is None:
        yield
        return
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=max(n, 1)):
        yield


# ----------------------------------------------------------------------------
# objective


def total_loss(logits: Tensor, labels, site_maps: dict, lambda_mb: float) -> Tensor:
    """Cross-entropy plus ``lambda_mb`` times the mean alignment loss over CAB sites."""
    ce = softmax_cross_entropy(logits, labels)
    if lambda_mb == 0 or not site_maps:
        return ce
    terms = [minibatch_alignment_loss(site_maps[k], labels) for k in sorted(site_maps)]
    mb = terms[0]
    for t in terms[1:]:
        mb = add(mb, t)
    return add(ce, scale_channels(mb, lambda_mb / len(terms)))


class SGDMomentum:
    def __init__(self, params: dict, lr: float, momentum: float = 0.9):
        self.params, self.lr, self.momentum = params, lr, momentum
        self.velocity = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self):
        for k, p in self.params.items():
            if p.grad is None:
                continue
            v = self.velocity[k]
            v *= self.momentum
            v += p.grad
            p.data -= self.lr * v


class Adam:
    def __init__(self, params: dict, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params, self.lr, self.beta1, self.beta2, self.eps = params, lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            step = (self.lr / c1) * m / (np.sqrt(v / c2) + self.eps)
            p.data -= step.astype(p.dtype, copy=False)


def make_optimizer(model: ModelState, cfg: TrainConfig):
    if cfg.optimizer == "adam":
        return Adam(model.params, cfg.lr, cfg.beta1, cfg.beta2)
    return SGDMomentum(model.params, cfg.lr, cfg.momentum)


def train_step(model: ModelState, images: np.ndarray, labels: np.ndarray, cfg: TrainConfig, optimizer) -> float:
    model.zero_grad()
    with Tape():
        logits, maps = forward(model, Tensor(standardize(images)))
        loss = total_loss(logits, labels, maps, cfg.lambda_mb)
        backward(loss)
    optimizer.step()
    return loss.item()


def train_epoch(model: ModelState, images: np.ndarray, labels: np.ndarray, cfg: TrainConfig, optimizer, epoch: int = 0):
    """One seeded pass over the data in mini-batches; returns (model, mean loss)."""
    order = np.random.default_rng([cfg.seed & (2**63 - 1), epoch]).permutation(len(labels))
    losses, sizes = [], []
    for b, start in enumerate(range(0, len(order), cfg.batch_size)):
        idx = order[start:start + cfg.batch_size]
        try:
            loss = train_step(model, images[idx], labels[idx], cfg, optimizer)
        except FloatingPointError as exc:
            raise DivergenceError(f"epoch {epoch}, batch {b}: {exc}") from exc
        if not np.isfinite(loss):
            raise DivergenceError(f"epoch {epoch}, batch {b}: non-finite loss")
        losses.append(loss)
        sizes.append(len(idx))
    return model, float(np.average(losses, weights=sizes))


def fit(model: ModelState, data: DatasetIndex, cfg: TrainConfig, epochs: Optional[int] = None) -> list:
    """Train on the ``train`` split; returns the per-epoch mean losses.

    When a ``val`` split exists the parameters of the epoch with the highest
    validation accuracy are kept (ties go to the later epoch).
    """
    images, labels = data.subset("train")
    has_val = len(data.indices("val")) > 0
    opt = make_optimizer(model, cfg)
    history, best_acc, best = [], -1.0, None
    for epoch in range(cfg.epochs if epochs is None else epochs):
        _, loss = train_epoch(model, images, labels, cfg, opt, epoch)
        history.append(loss)
        if has_val:
            acc = evaluate(model, data, "val").accuracy
            log.info("epoch %d loss %.5f val_acc %.4f", epoch, loss, acc)
            if acc >= best_acc:
                best_acc, best = acc, {k: p.data.copy() for k, p in model.params.items()}
        else:
            log.info("epoch %d loss %.5f", epoch, loss)
    if best is not None:
        for k, p in model.params.items():
            p.data[...] = best[k]
    return history


# ----------------------------------------------------------------------------
# evaluation


@dataclass
class Metrics:
    accuracy: float
    f1_macro: float
    per_class_f1: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"accuracy": self.accuracy, "f1_macro": self.f1_macro, "per_class_f1": list(self.per_class_f1)}


def classification_metrics(labels, preds, num_classes: int) -> Metrics:
    y = np.asarray(labels, dtype=np.int64)
    p = np.asarray(preds, dtype=np.int64)
    if y.size == 0:
        raise ValueError("cannot score an empty split")
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (y, p), 1)
    tp = np.diag(cm).astype(float)
    prec_den = cm.sum(axis=0)
    rec_den = cm.sum(axis=1)
    f1 = []
    for k in range(num_classes):
        prec = tp[k] / prec_den[k] if prec_den[k] else 0.0
        rec = tp[k] / rec_den[k] if rec_den[k] else 0.0
        f1.append(float(2 * prec * rec / (prec + rec)) if prec + rec > 0 else 0.0)
    return Metrics(accuracy=float(tp.sum() / y.size), f1_macro=float(np.mean(f1)), per_class_f1=f1)


def predict(model: ModelState, images: np.ndarray, batch_size: int = 64, with_maps: bool = False):
    """Argmax predictions (and, optionally, per-site causality maps as arrays)."""
    preds, maps = [], {}
    for start in range(0, len(images), batch_size):
        logits, site_maps = forward(model, Tensor(standardize(images[start:start + batch_size])))
        preds.append(logits.data.argmax(axis=1))
        if with_maps:
            for k, cm in site_maps.items():
                maps.setdefault(k, []).append(cm.c.data)
    preds = np.concatenate(preds)
    if with_maps:
        return preds, {k: np.concatenate(v) for k, v in maps.items()}
    return preds


def evaluate(model: ModelState, data: DatasetIndex, split: str = "test") -> Metrics:
    images, labels = data.subset(split)
    if len(labels) == 0:
        raise ValueError(f"split {split!r} is empty")
    return classification_metrics(labels, predict(model, images), model.num_classes)


def within_class_map_mse(model: ModelState, images: np.ndarray, labels: np.ndarray) -> float:
    """Mean over CAB sites of the per-sample MSE to the class-mean causality map."""
    _, maps = predict(model, images, with_maps=True)
    labels = np.asarray(labels)
    scores = []
    for k in sorted(maps):
        C = maps[k].astype(np.float64)
        err = 0.0
        for cls in np.unique(labels):
            sel = C[labels == cls]
            err += ((sel - sel.mean(axis=0)) ** 2).sum()
        scores.append(err / C.size)
    return float(np.mean(scores)) if scores else 0.0


# ----------------------------------------------------------------------------
# checkpoints


def save_checkpoint(model: ModelState, path, extra: Optional[dict] = None) -> Path:
    """Write ``path/manifest.json`` and ``path/params.bin`` (little-endian float32)."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    manifest = {
        "version": CHECKPOINT_VERSION,
        "variant": model.variant,
        "spec_hash": model.spec_hash,
        "num_classes": model.num_classes,
        "readout": model.readout,
        "cab": {"eps": model.cab.eps, "orientation": model.cab.orientation},
        "connectome": json.loads(model.source_spec.to_json()),
        "params": [{"name": k, "shape": list(p.shape)} for k, p in model.params.items()],
    }
    if extra:
        manifest["extra"] = extra
    blob = b"".join(np.ascontiguousarray(p.data, dtype="<f4").tobytes() for p in model.params.values())
    (path / BLOB).write_bytes(blob)
    (path / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def read_manifest(path) -> dict:
    return json.loads((Path(path) / MANIFEST).read_text(encoding="utf-8"))


def load_checkpoint(path, spec=None) -> ModelState:
    """Rebuild the model stored at ``path``; refuses other versions or specs."""
    path = Path(path)
    manifest = read_manifest(path)
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint version {manifest.get('version')!r} != {CHECKPOINT_VERSION}")
    source = parse_connectome(json.dumps(manifest["connectome"]))
    if source.spec_hash() != manifest["spec_hash"]:
        raise CheckpointError("embedded connectome does not match the recorded spec_hash")
    if spec is not None and spec.spec_hash() != manifest["spec_hash"]:
        raise CheckpointError(f"spec hash mismatch: checkpoint {manifest['spec_hash'][:12]}, given {spec.spec_hash()[:12]}")
    cab = CabConfig(**manifest["cab"])
    variant = manifest["variant"]
    kw = {} if variant == "baseline" else {"cab": cab, "readout": manifest["readout"]}
    model = build_variant(variant, source, manifest["num_classes"], **kw)
    entries = manifest["params"]
    if [e["name"] for e in entries] != list(model.params):
        raise CheckpointError("parameter names in manifest do not match the rebuilt model")
    blob = (path / BLOB).read_bytes()
    need = 4 * sum(int(np.prod(e["shape"])) for e in entries)
    if len(blob) != need:
        raise CheckpointError(f"parameter blob has {len(blob)} bytes, manifest needs {need}")
    offset = 0
    for e in entries:
        p = model.params[e["name"]]
        if tuple(e["shape"]) != p.shape:
            raise CheckpointError(f"shape mismatch for {e['name']}: {e['shape']} vs {list(p.shape)}")
        n = p.size
        p.data[...] = np.frombuffer(blob, dtype="<f4", count=n, offset=offset).reshape(p.shape)
        offset += 4 * n
    return model


def reproducibility_stanza(seed: int, cfg: Optional[TrainConfig], spec_hash: Optional[str]) -> dict:
    return {
        "seed": seed,
        "config_hash": cfg.config_hash() if cfg is not None else None,
        "spec_hash": spec_hash,
        "artifact_version": __version__,
    }


def run_training(
    variant: str,
    spec,
    data: DatasetIndex,
    cfg: TrainConfig,
    out_dir=None,
) -> dict:
    """Build, initialise, train and evaluate one model; optionally write outputs.

    Returns a results dict with the metrics on val and test, the loss
    history and the reproducibility stanza.
    """
    model = build_variant(variant, spec, data.num_classes, seed=cfg.seed, **({} if variant == "baseline" else {"cab": cfg.cab}))
    history = fit(model, data, cfg)
    results = {
        "variant": variant,
        "history": history,
        "val": evaluate(model, data, "val").to_dict() if len(data.indices("val")) else None,
        "test": evaluate(model, data, "test").to_dict() if len(data.indices("test")) else None,
        "reproducibility": reproducibility_stanza(cfg.seed, cfg, model.spec_hash),
    }
    if out_dir is not None:
        out = Path(out_dir)
        save_checkpoint(model, out / "checkpoint", extra={"train_config": asdict(cfg)})
        (out / "metrics.json").write_text(json.dumps(results, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    results["model"] = model
    return results
