"""Desk-scale pre-training loop: optimizer, schedule, online probe, checkpoints.

The loop is single-stream and fully deterministic: one generator seeded from
the config drives augmentation, shuffling and initialization, so identical
configs give identical metrics files and checkpoints.
"""

from __future__ import annotations

import hashlib
import io
import json
import os
import struct
from dataclasses import dataclass, field, asdict

import numpy as np

from . import data as data_mod
from . import tensor as T
from .augment import AugmentationPolicy, augment_pair, desk_policy
from .cossl import DualNetworks
from .nn import Linear
from .rf import ArchConfig, build_backbone
from .tensor import Tensor

CKPT_MAGIC = b"COOC"
CKPT_VERSION = 1
METRICS_HEADER = "epoch,step,loss_total,loss_g,loss_l,probe_acc,lr,tau"

_DTYPES = {0: np.float32, 1: np.float64, 2: np.int64}
_DTYPE_CODES = {np.dtype(v): k for k, v in _DTYPES.items()}


class TrainingDiverged(RuntimeError):
    """Raised when the loss stops being finite; carries a diagnostic record."""

    def __init__(self, record):
        super().__init__(f"non-finite loss at epoch {record['epoch']} step {record['step']}")
        self.record = record


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

def _default_arch():
    return ArchConfig(
        base="rf_resnet18",
        small_image_stem=True,
        strides=(2, 1, 1),
        blocks=(1, 1, 1, 1),
        width=0.125,
        post_pool_mlp=True,
    )


@dataclass
class TrainConfig:
    dataset: str = ""
    eval_dataset: str = ""
    dataset_format: str = "records"  # records | image_folder
    image_size: int = 32
    num_classes: int = 10
    epochs: int = 20
    batch_size: int = 32
    base_lr: float = 0.4
    lr_schedule: str = "cosine"      # cosine | constant
    warmup_frac: float = 0.05
    optimizer: str = "sgd"           # sgd | adaptive
    momentum: float = 0.9
    weight_decay: float = 1e-6
    seed: int = 0
    w_s: float = 0.5
    tau: float = 0.99
    grid_target: int = 0             # 0 keeps the native grid
    proj_hidden: int = 512
    proj_out: int = 64
    probe_lr: float = 0.2
    eval_layer: str = "patch"        # patch | post_mlp
    checkpoint_every: int = 0        # epochs; 0 checkpoints only at the end
    arch: ArchConfig = field(default_factory=_default_arch)
    policy: AugmentationPolicy = None

    def __post_init__(self):
        if self.policy is None:
            self.policy = desk_policy(output_size=self.image_size)
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.lr_schedule not in ("cosine", "constant"):
            raise ValueError(f"unknown lr schedule {self.lr_schedule!r}")
        if self.optimizer not in ("sgd", "adaptive"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.eval_layer not in ("patch", "post_mlp"):
            raise ValueError(f"unknown eval layer {self.eval_layer!r}")
        if self.dataset_format not in ("records", "image_folder"):
            raise ValueError(f"unknown dataset format {self.dataset_format!r}")

    def to_flat_dict(self):
        flat = {}
        for key, val in asdict(self).items():
            if key in ("arch", "policy"):
                continue
            flat[key] = val
        flat.update(self.arch.to_flat_dict())
        flat.update(self.policy.to_flat_dict())
        return flat

    def config_hash(self):
        flat = self.to_flat_dict()
        blob = "\n".join(f"{k}={flat[k]}" for k in sorted(flat))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# optimizers and schedule
# ---------------------------------------------------------------------------

class SgdMomentum:
    def __init__(self, params, momentum=0.9, weight_decay=0.0):
        self.params = list(params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr):
        for p, v in zip(self.params, self.velocity):
            if p.grad is None:
                continue
            g = p.grad.data + self.weight_decay * p.data
            v *= self.momentum
            v += g
            p.data -= lr * v

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def state_tensors(self):
        return [(f"opt.v.{i}", v) for i, v in enumerate(self.velocity)]


class Adaptive:
    """Adam with the usual bias correction."""

    def __init__(self, params, weight_decay=0.0, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.weight_decay = weight_decay
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, lr):
        self.t += 1
        b1t = 1.0 - self.beta1 ** self.t
        b2t = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad.data + self.weight_decay * p.data
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            p.data -= lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def state_tensors(self):
        out = [(f"opt.m.{i}", m) for i, m in enumerate(self.m)]
        out += [(f"opt.v.{i}", v) for i, v in enumerate(self.v)]
        return out


def make_optimizer(config, params):
    if config.optimizer == "adaptive":
        return Adaptive(params, weight_decay=config.weight_decay)
    return SgdMomentum(params, momentum=config.momentum, weight_decay=config.weight_decay)


def lr_at(config, step, total_steps):
    if config.lr_schedule == "constant" or total_steps <= 1:
        return config.base_lr
    warmup = max(1, int(round(config.warmup_frac * total_steps)))
    if step < warmup:
        return config.base_lr * (step + 1) / warmup
    frac = (step - warmup) / max(1, total_steps - warmup)
    return config.base_lr * 0.5 * (1.0 + np.cos(np.pi * frac))


# ---------------------------------------------------------------------------
# online probe
# ---------------------------------------------------------------------------

class ProbeHead:
    """Affine classifier on detached features; never touches the backbone."""

    def __init__(self, features, classes, lr, rng=None):
        self.linear = Linear(features, classes, bias=True, rng=rng or np.random.default_rng(0))
        self.classes = classes
        self.lr = lr

    def logits(self, feats):
        return self.linear(feats)

    def step(self, feats, labels):
        """One SGD step of cross-entropy on detached features; returns the loss."""
        feats = T.stop_gradient(feats)
        labels = np.asarray(labels)
        if labels.min() < 0 or labels.max() >= self.classes:
            raise ValueError(f"labels out of range for {self.classes} classes")
        onehot = np.zeros((labels.size, self.classes), dtype=feats.data.dtype)
        onehot[np.arange(labels.size), labels] = 1.0
        with T.tape():
            logp = T.log_softmax(self.logits(feats))
            loss = T.mul(T.tensor_mean(T.tensor_sum(T.mul(logp, Tensor(onehot)), axis=1)), -1.0)
            T.backward(loss)
        for _, p in self.linear.named_parameters():
            if p.grad is not None:
                p.data -= self.lr * p.grad.data
                p.grad = None
        return float(loss.data.reshape(()))

    def predict(self, feats):
        return np.argmax(self.logits(feats).data, axis=1)


def extract_features(nets, images, eval_layer, mode="eval", batch=64):
    """Detached feature rows for a stack of CHW images."""
    rows = []
    with T.no_grad():
        for i in range(0, len(images), batch):
            out = nets.backbone(Tensor(images[i : i + batch]), mode=mode)
            feats = out.global_pooled if eval_layer == "patch" else out.global_
            rows.append(feats.data.copy())
    return np.concatenate(rows, axis=0)


def probe_accuracy(nets, probe, images, labels, eval_layer="patch"):
    """Top-1 fraction of the probe over an evaluation set (eval-mode stats)."""
    feats = extract_features(nets, images, eval_layer)
    if probe.linear.weight.data.shape[0] != feats.shape[1]:
        raise ValueError(
            f"probe expects {probe.linear.weight.data.shape[0]} features, got {feats.shape[1]}"
        )
    pred = probe.predict(Tensor(feats))
    return float((pred == np.asarray(labels)).mean())


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def _named_state(nets, probe, opt):
    tensors = []
    for label, mod in (("backbone", nets.backbone), ("g1", nets.g1), ("q1", nets.q1)):
        tensors += [(f"online.{label}.{n}", p.data) for n, p in mod.named_parameters()]
        tensors += [(f"online.{label}.{n}", b) for n, b in mod.named_buffers()]
    if not nets.shared_local_head:
        for label, mod in (("g2", nets.g2), ("q2", nets.q2)):
            tensors += [(f"online.{label}.{n}", p.data) for n, p in mod.named_parameters()]
            tensors += [(f"online.{label}.{n}", b) for n, b in mod.named_buffers()]
    targets = [("backbone", nets.target_backbone), ("g1", nets.target_g1)]
    if not nets.shared_local_head:
        targets.append(("g2", nets.target_g2))
    for label, mod in targets:
        tensors += [(f"target.{label}.{n}", p.data) for n, p in mod.named_parameters()]
        tensors += [(f"target.{label}.{n}", b) for n, b in mod.named_buffers()]
    tensors += [(f"probe.{n}", p.data) for n, p in probe.linear.named_parameters()]
    if opt is not None:
        tensors += opt.state_tensors()
    return tensors


def save_checkpoint(path, nets, probe, opt, config, epoch, step, rng):
    meta = {
        "epoch": int(epoch),
        "step": int(step),
        "rng_state": rng.bit_generator.state if rng is not None else None,
        "opt_t": getattr(opt, "t", 0) if opt is not None else 0,
    }
    tensors = _named_state(nets, probe, opt)
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<I", CKPT_VERSION))
    chash = config.config_hash().encode()
    buf.write(struct.pack("<I", len(chash)))
    buf.write(chash)
    meta_blob = json.dumps(meta, sort_keys=True).encode()
    buf.write(struct.pack("<I", len(meta_blob)))
    buf.write(meta_blob)
    buf.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors:
        nb = name.encode()
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<BB", _DTYPE_CODES[arr.dtype], arr.ndim))
        for dim in arr.shape:
            buf.write(struct.pack("<I", dim))
        buf.write(np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<")).tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())
    return path


def read_checkpoint(path):
    """Parse a checkpoint file into (config_hash, meta, {name: array})."""
    with open(path, "rb") as fh:
        blob = fh.read()
    view = io.BytesIO(blob)

    def take(n, what):
        chunk = view.read(n)
        if len(chunk) != n:
            raise ValueError(f"{path}: truncated checkpoint while reading {what}")
        return chunk

    if take(4, "magic") != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version = struct.unpack("<I", take(4, "version"))[0]
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    hlen = struct.unpack("<I", take(4, "hash length"))[0]
    chash = take(hlen, "config hash").decode()
    mlen = struct.unpack("<I", take(4, "meta length"))[0]
    meta = json.loads(take(mlen, "metadata").decode())
    count = struct.unpack("<I", take(4, "tensor count"))[0]
    tensors = {}
    for _ in range(count):
        nlen = struct.unpack("<H", take(2, "name length"))[0]
        name = take(nlen, "tensor name").decode()
        code, ndim = struct.unpack("<BB", take(2, "dtype/ndim"))
        if code not in _DTYPES:
            raise ValueError(f"{path}: unknown dtype code {code} for {name!r}")
        shape = tuple(struct.unpack("<I", take(4, "dim"))[0] for _ in range(ndim))
        dtype = np.dtype(_DTYPES[code])
        payload = take(int(np.prod(shape, dtype=np.int64)) * dtype.itemsize, f"payload of {name!r}")
        arr = np.frombuffer(payload, dtype=dtype.newbyteorder("<")).astype(dtype)
        tensors[name] = arr.reshape(shape)
    if view.read(1):
        raise ValueError(f"{path}: trailing bytes after the last tensor")
    return chash, meta, tensors


def load_checkpoint(path, nets, probe, opt, config=None, rng=None):
    """Restore state in place; returns the checkpoint metadata."""
    chash, meta, tensors = read_checkpoint(path)
    if config is not None and chash != config.config_hash():
        import warnings

        warnings.warn(f"{path}: checkpoint config hash {chash} differs from the current config")
    expected = _named_state(nets, probe, opt)
    for name, arr in expected:
        if name not in tensors:
            raise ValueError(f"{path}: checkpoint is missing tensor {name!r}")
        stored = tensors[name]
        if stored.shape != arr.shape:
            raise ValueError(
                f"{path}: shape mismatch for {name!r}: checkpoint {stored.shape}, model {arr.shape}"
            )
        arr[...] = stored.astype(arr.dtype)
    if opt is not None:
        opt.t = meta.get("opt_t", 0)
    if rng is not None and meta.get("rng_state") is not None:
        rng.bit_generator.state = meta["rng_state"]
    return meta


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def build_state(config):
    """Networks, probe and optimizer from a config, deterministically seeded."""
    rng = np.random.default_rng(config.seed)
    backbone = build_backbone(config.arch, rng=rng)
    nets = DualNetworks(
        backbone,
        proj_hidden=config.proj_hidden,
        proj_out=config.proj_out,
        tau=config.tau,
        w_s=config.w_s,
        grid_target=config.grid_target or None,
        rng=rng,
    )
    probe = ProbeHead(backbone.features, config.num_classes, config.probe_lr, rng=rng)
    opt = make_optimizer(config, [p for p in nets.online_parameters() if p.requires_grad])
    return nets, probe, opt


def load_dataset(config):
    if config.dataset_format == "image_folder":
        images, labels, _ = data_mod.load_image_folder(config.dataset, config.image_size)
        return images, labels
    return data_mod.read_records(config.dataset, config.image_size)


def _augment_batch(images, policy, rng):
    views1, views2 = [], []
    for img in images:
        v1, v2 = augment_pair(img, policy, rng)
        views1.append(v1)
        views2.append(v2)
    return np.stack(views1), np.stack(views2)


def train_step(nets, probe, opt, views, labels, lr, epoch=0, step=0):
    """One optimization step plus EMA and probe updates; returns a metrics dict."""
    v1, v2 = views
    with T.tape():
        outputs = nets.forward_views(v1, v2, mode="train")
        total, l_g, l_l = nets.loss_total(outputs)
        if not np.isfinite(total.data):
            raise TrainingDiverged(
                {
                    "epoch": epoch,
                    "step": step,
                    "loss_total": float(total.data.reshape(())),
                    "loss_g": float(l_g.data.reshape(())),
                    "lr": lr,
                }
            )
        T.backward(total)
    opt.step(lr)
    opt.zero_grad()
    nets.ema_update()
    with T.no_grad():
        feats = nets.backbone(v1 if isinstance(v1, Tensor) else Tensor(v1), mode="train")
    probe_loss = probe.step(feats.global_pooled, labels)
    return {
        "loss_total": float(total.data.reshape(())),
        "loss_g": float(l_g.data.reshape(())),
        "loss_l": float(l_l.data.reshape(())) if l_l is not None else 0.0,
        "probe_loss": probe_loss,
        "lr": lr,
        "tau": nets.tau,
    }


def fit(config, run_dir=None, resume=None, log=None):
    """Full pre-training run; returns (nets, probe, history).

    ``history`` is a list of per-epoch dicts; when ``run_dir`` is given,
    metrics.csv and ckpt-*.bin files are written there.
    """
    train_x, train_y = load_dataset(config)
    if config.eval_dataset:
        if config.dataset_format == "image_folder":
            eval_x, eval_y, _ = data_mod.load_image_folder(config.eval_dataset, config.image_size)
        else:
            eval_x, eval_y = data_mod.read_records(config.eval_dataset, config.image_size)
    else:
        held = max(1, len(train_x) // 6)
        eval_x, eval_y = train_x[-held:], train_y[-held:]
        train_x, train_y = train_x[:-held], train_y[:-held]
    if len(train_x) == 0:
        raise ValueError("empty training set")

    nets, probe, opt = build_state(config)
    rng = np.random.default_rng(config.seed + 1)
    start_epoch = 0
    if resume is not None:
        meta = load_checkpoint(resume, nets, probe, opt, config=config, rng=rng)
        start_epoch = meta["epoch"]

    steps_per_epoch = max(1, len(train_x) // config.batch_size)
    total_steps = config.epochs * steps_per_epoch

    metrics_path = None
    if run_dir is not None:
        os.makedirs(run_dir, exist_ok=True)
        metrics_path = os.path.join(run_dir, "metrics.csv")
        if resume is None or not os.path.exists(metrics_path):
            with open(metrics_path, "w") as fh:
                fh.write(METRICS_HEADER + "\n")

    history = []
    step = start_epoch * steps_per_epoch
    for epoch in range(start_epoch, config.epochs):
        order = rng.permutation(len(train_x))
        epoch_rows = []
        for b in range(steps_per_epoch):
            idx = order[b * config.batch_size : (b + 1) * config.batch_size]
            views = _augment_batch(train_x[idx], config.policy, rng)
            lr = lr_at(config, step, total_steps)
            rec = train_step(nets, probe, opt, views, train_y[idx], lr, epoch=epoch, step=step)
            epoch_rows.append(rec)
            step += 1
        acc = probe_accuracy(nets, probe, _chw(eval_x), eval_y, config.eval_layer)
        summary = {
            "epoch": epoch,
            "step": step,
            "loss_total": float(np.mean([r["loss_total"] for r in epoch_rows])),
            "loss_g": float(np.mean([r["loss_g"] for r in epoch_rows])),
            "loss_l": float(np.mean([r["loss_l"] for r in epoch_rows])),
            "probe_acc": acc,
            "lr": epoch_rows[-1]["lr"],
            "tau": nets.tau,
        }
        history.append(summary)
        if log is not None:
            log(summary)
        if metrics_path is not None:
            with open(metrics_path, "a") as fh:
                fh.write(
                    f"{epoch},{step},{summary['loss_total']:.6f},{summary['loss_g']:.6f},"
                    f"{summary['loss_l']:.6f},{acc:.6f},{summary['lr']:.6f},{nets.tau:.6f}\n"
                )
        if run_dir is not None and config.checkpoint_every and (epoch + 1) % config.checkpoint_every == 0:
            save_checkpoint(
                os.path.join(run_dir, f"ckpt-{epoch + 1:04d}.bin"),
                nets, probe, opt, config, epoch + 1, step, rng,
            )
    if run_dir is not None:
        save_checkpoint(
            os.path.join(run_dir, "ckpt-final.bin"),
            nets, probe, opt, config, config.epochs, step, rng,
        )
    return nets, probe, history


def _chw(images):
    """HWC float images -> float32 NCHW."""
    return np.ascontiguousarray(np.asarray(images).transpose(0, 3, 1, 2)).astype(np.float32)
