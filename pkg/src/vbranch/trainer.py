"""Training loop: Adam, stepped learning rate, the two branch schemes, checkpoints."""

from __future__ import annotations

import csv
import logging
import struct
import zlib
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .branching import BranchedModel, ModelConfig, build_model, concat_embeddings
from .datapipe import SUBSETS, Dataset, orientation_subsets, sample_pk_batch
from .errors import AffectedParamError, ConfigError, DataError, ModelError
from .objectives import (REGION_KEYPOINTS, REGIONS, LossBreakdown, combined_loss, localization_loss,
                         region_heatmap, triplet_loss_batch_hard)

log = logging.getLogger(__name__)

SCHEMES = ("baseline", "landmark", "orientation")
HISTORY_HEADER = ("step", "epoch", "lr", "triplet", "loc_neck", "loc_hip", "loc_ankle", "total")
CHECKPOINT_MAGIC = b"VBCK"
CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    """Training hyperparameters; defaults are desk scale.

    :meth:`full_scale` gives the published settings (P=18, K=4, 150 epochs
    of 100 steps, decay from epoch 50).
    """

    scheme: str = "baseline"
    b: int = 1
    delta: float = 0.0
    P: int = 6
    K: int = 3
    m: float = 0.2
    lam: float = 0.2
    sigma_h: float = 1.5
    lr0: float = 1e-3
    t0: int = 10
    epochs: int = 20
    steps_per_epoch: int = 10
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    seed: int = 0
    hidden: int = 256
    embed: int = 128

    @classmethod
    def full_scale(cls, **overrides) -> "TrainConfig":
        base = dict(P=18, K=4, lr0=3e-4, t0=50, epochs=150, steps_per_epoch=100, hidden=1024, embed=128)
        base.update(overrides)
        return cls(**base)

    def validate(self):
        if self.scheme not in SCHEMES:
            raise ConfigError(f"scheme must be one of {SCHEMES}, got {self.scheme!r}")
        for name in ("b", "P", "K", "t0", "epochs", "steps_per_epoch", "hidden", "embed"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        for name in ("m", "sigma_h", "eps_adam"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be > 0")
        if self.lr0 < 0 or self.lam < 0:
            raise ConfigError("lr0 and lam must be >= 0")
        if not 0 <= self.delta <= 1:
            raise ConfigError("delta must lie in [0, 1]")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("Adam betas must lie in [0, 1)")
        if self.scheme == "orientation" and self.b < len(SUBSETS):
            raise ConfigError(f"orientation scheme needs b >= {len(SUBSETS)}")
        return self

    def model_config(self, input_shape=(32, 16, 3)) -> ModelConfig:
        return ModelConfig(input_shape=tuple(input_shape), hidden=self.hidden, embed=self.embed)

    def to_text(self) -> str:
        """Canonical ``key = value`` lines in field order."""
        return "".join(f"{f.name} = {getattr(self, f.name)!r}\n".replace("'", "") for f in fields(self))

    @classmethod
    def from_mapping(cls, mapping: dict) -> "TrainConfig":
        kw = {}
        types = {f.name: f.type for f in fields(cls)}
        for k, v in mapping.items():
            if k not in types:
                raise ConfigError(f"unknown training key {k!r}")
            t = types[k]
            try:
                kw[k] = v if t == "str" else (int(v) if t == "int" else float(v))
            except ValueError as exc:
                raise ConfigError(f"{k}: {exc}") from exc
        return cls(**kw)


def lr_at(t: int, lr0: float, t0: int) -> float:
    """Learning rate at (1-based) epoch ``t``: constant to ``t0``, then halved every 10 epochs."""
    if t <= t0:
        return lr0
    return lr0 * 0.5 ** ((t - t0) // 10)


def stream(seed: int, name: str) -> np.random.Generator:
    """Named, independent random stream derived from one seed."""
    return np.random.default_rng([int(seed), zlib.crc32(name.encode())])


class Adam:
    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step_count = 0

    def step(self, params, lr: float):
        """One bias-corrected update over ``params`` (objects with name/data/grad/assign).

        A parameter without a gradient is treated as having gradient 0.
        """
        grads = {}
        bad = []
        for p in params:
            g = p.grad if p.grad is not None else np.zeros(p.shape)
            if not np.all(np.isfinite(g)):
                bad.append(p.name)
            grads[p.name] = g
        if bad:
            raise AffectedParamError(bad)
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1**t
        c2 = 1.0 - self.beta2**t
        for p in params:
            g = grads[p.name]
            m = self.beta1 * self.m.get(p.name, 0.0) + (1.0 - self.beta1) * g
            v = self.beta2 * self.v.get(p.name, 0.0) + (1.0 - self.beta2) * g * g
            self.m[p.name], self.v[p.name] = m, v
            p.assign(p.data - lr * (m / c1) / (np.sqrt(v / c2) + self.eps))


@dataclass
class Checkpoint:
    config_text: str
    params: dict  # name -> float32 array (parameters and buffers)
    moments: dict  # "m/<name>" | "v/<name>" -> float32 array
    epoch: int = 0
    adam_step: int = 0

    def save(self, path):
        Path(path).write_bytes(self.to_bytes())

    def to_bytes(self) -> bytes:
        out = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION)]
        text = self.config_text.encode()
        out.append(struct.pack("<I", len(text)) + text)
        out.append(struct.pack("<II", self.epoch, self.adam_step))
        for table in (self.params, self.moments):
            out.append(struct.pack("<I", len(table)))
            for name, arr in table.items():
                a = np.asarray(arr, dtype="<f4")
                nb = name.encode()
                out.append(struct.pack("<H", len(nb)) + nb + struct.pack("<I", a.ndim))
                out.append(struct.pack(f"<{a.ndim}I", *a.shape) + a.tobytes(order="C"))
        return b"".join(out)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        raw = Path(path).read_bytes()
        if raw[:4] != CHECKPOINT_MAGIC:
            raise ModelError(f"{path}: not a VBCK checkpoint")
        (version,) = struct.unpack_from("<I", raw, 4)
        if version != CHECKPOINT_VERSION:
            raise ModelError(f"{path}: unsupported checkpoint version {version}")
        pos = 8
        (n,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        text = raw[pos : pos + n].decode()
        pos += n
        epoch, adam_step = struct.unpack_from("<II", raw, pos)
        pos += 8
        tables = []
        for _ in range(2):
            (count,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            table = {}
            for _ in range(count):
                (nl,) = struct.unpack_from("<H", raw, pos)
                pos += 2
                name = raw[pos : pos + nl].decode()
                pos += nl
                (rank,) = struct.unpack_from("<I", raw, pos)
                pos += 4
                dims = struct.unpack_from(f"<{rank}I", raw, pos)
                pos += 4 * rank
                size = int(np.prod(dims)) if rank else 1
                table[name] = np.frombuffer(raw, dtype="<f4", count=size, offset=pos).reshape(dims).copy()
                pos += 4 * size
            tables.append(table)
        return cls(text, tables[0], tables[1], epoch, adam_step)

    def config(self) -> TrainConfig:
        from .config import parse_config_text

        return TrainConfig.from_mapping({k: v for k, v in parse_config_text(self.config_text).items()
                                         if k in {f.name for f in fields(TrainConfig)}})


def make_checkpoint(model: BranchedModel, cfg: TrainConfig, opt: Adam | None = None, epoch: int = 0) -> Checkpoint:
    """Snapshot ``model``; parameters are snapped to float32 first so the
    in-memory model and a reloaded one agree bit for bit."""
    model.snap_float32()
    params = {n: p.data.astype(np.float32) for n, p in model.params.items()}
    params.update({n: b.astype(np.float32) for n, b in model.buffers.items()})
    moments = {}
    if opt is not None:
        for n in model.params:
            if n in opt.m:
                moments[f"m/{n}"] = np.asarray(opt.m[n], dtype=np.float32)
                moments[f"v/{n}"] = np.asarray(opt.v[n], dtype=np.float32)
    text = cfg.to_text() + f"input_shape = {'x'.join(map(str, model.config.input_shape))}\n"
    return Checkpoint(text, params, moments, epoch, opt.step_count if opt else 0)


def model_from_checkpoint(ckpt: Checkpoint) -> BranchedModel:
    from .config import parse_config_text

    cfg = ckpt.config()
    raw = parse_config_text(ckpt.config_text)
    shape = tuple(int(v) for v in raw.get("input_shape", "32x16x3").split("x"))
    model = build_model(cfg.model_config(shape), cfg.b, cfg.delta, np.random.default_rng(0))
    expected = set(model.params) | set(model.buffers)
    if set(ckpt.params) != expected:
        raise ModelError("checkpoint parameter names do not match the model")
    for name, arr in ckpt.params.items():
        if name in model.params:
            model.params[name].assign(arr.astype(np.float64))
        else:
            if arr.shape != model.buffers[name].shape:
                raise ModelError(f"buffer {name}: shape {arr.shape} vs {model.buffers[name].shape}")
            model.buffers[name] = arr.astype(np.float64)
    return model


# ------------------------------------------------------------------- schemes

@dataclass
class TrainResult:
    model: BranchedModel
    checkpoint: Checkpoint
    history: list = field(default_factory=list)  # dict rows, HISTORY_HEADER keys
    stats: dict = field(default_factory=dict)


def region_for_branch(i: int) -> str | None:
    """Landmark scheme: branch 1 neck, 2 hip, 3 ankle, the rest unconstrained."""
    return REGIONS[i - 1] if i <= len(REGIONS) else None


def _has_region_keypoints(data: Dataset, regions, threshold=0.1):
    def accept(rec):
        kp = data.keypoints.get(rec.sample_id)
        if kp is None:
            return False
        pts = kp.present(threshold)
        return all(n in pts for r in regions for n in REGION_KEYPOINTS[r])
    return accept


def _heatmaps(data: Dataset, sample_ids, region, sigma_h, cache):
    out = []
    hw = data.image_hw()
    for sid in sample_ids:
        key = (sid, region)
        if key not in cache:
            kp = data.keypoints.get(sid)
            if kp is None:
                raise DataError(f"no keypoints for {sid}")
            cache[key] = region_heatmap(kp.present(), region, kp.image_size or hw, sigma_h)
        out.append(cache[key])
    return out


def _row(step, epoch, lr, bd: LossBreakdown) -> dict:
    return {"step": step, "epoch": epoch, "lr": lr, "triplet": bd.triplet,
            **{f"loc_{r}": bd.localization.get(r, 0.0) for r in REGIONS}, "total": bd.total}


def new_model(cfg: TrainConfig, input_shape=(32, 16, 3)) -> BranchedModel:
    return build_model(cfg.model_config(input_shape), cfg.b, cfg.delta, stream(cfg.seed, "init"))


def train(model: BranchedModel, data: Dataset, cfg: TrainConfig, steps: int | None = None, callback=None) -> TrainResult:
    """Run ``cfg.scheme`` for ``epochs * steps_per_epoch`` steps (or ``steps``).

    ``callback(step, model)`` is called before the first step (with step 0)
    and after every step.
    """
    cfg.validate()
    if model.plan.b != cfg.b:
        raise ConfigError(f"model has {model.plan.b} branches, config says {cfg.b}")
    total_steps = cfg.epochs * cfg.steps_per_epoch if steps is None else steps
    rng = stream(cfg.seed, "sampler")
    opt = Adam(cfg.beta1, cfg.beta2, cfg.eps_adam)
    train_recs = data.manifest.split("train")
    stats: dict = {"resampled": 0}
    heat_cache: dict = {}

    if cfg.scheme == "orientation":
        split = orientation_subsets(train_recs, data.keypoints)
        stats["unassignable"] = len(split.unassignable)
        stats["subset_sizes"] = {s: len(v) for s, v in split.subsets.items()}
        branch_pools = []
        for i in range(1, cfg.b + 1):
            recs = split.subsets[SUBSETS[i - 1]] if i <= len(SUBSETS) else train_recs
            ids = {r.identity for r in recs}
            if len(ids) < 2:
                name = SUBSETS[i - 1] if i <= len(SUBSETS) else "full"
                raise ConfigError(f"subset {name} has {len(ids)} identities; need at least 2")
            branch_pools.append(recs)
    if cfg.scheme == "landmark":
        regions = [r for r in (region_for_branch(i) for i in range(1, cfg.b + 1)) if r]
        accept = _has_region_keypoints(data, regions)
        if not any(accept(r) for r in train_recs):
            raise DataError("landmark scheme needs keypoints for the training images")

    history = []
    if callback:
        callback(0, model)
    for step in range(1, total_steps + 1):
        epoch = (step - 1) // cfg.steps_per_epoch + 1
        lr = lr_at(epoch, cfg.lr0, cfg.t0)
        model.zero_grad()
        if cfg.scheme == "orientation":
            tl = None
            for i, pool in enumerate(branch_pools, 1):
                n_ids = len({r.identity for r in pool})
                batch = sample_pk_batch(pool, min(cfg.P, n_ids), cfg.K, rng)
                x = T.Value(data.stack(batch.sample_ids))
                emb, _ = model.branch(model.stem(x, train=True), i, train=True)
                li = triplet_loss_batch_hard(emb, batch.labels, cfg.m)
                tl = li if tl is None else T.add(tl, li)
            total, bd = combined_loss(tl, {}, cfg.lam)
        else:
            if cfg.scheme == "landmark":
                batch = sample_pk_batch(train_recs, cfg.P, cfg.K, rng, accept=accept, stats=stats)
            else:
                batch = sample_pk_batch(train_recs, cfg.P, cfg.K, rng)
            x = T.Value(data.stack(batch.sample_ids))
            embs, acts = model.forward_with_activations(x, train=True)
            tl = triplet_loss_batch_hard(concat_embeddings(embs), batch.labels, cfg.m)
            loc = {}
            if cfg.scheme == "landmark":
                for i in range(1, cfg.b + 1):
                    region = region_for_branch(i)
                    if region:
                        hms = _heatmaps(data, batch.sample_ids, region, cfg.sigma_h, heat_cache)
                        loc[region] = localization_loss(acts[i - 1], hms)
            total, bd = combined_loss(tl, loc, cfg.lam)
        total.backward()
        opt.step(model.trainable(), lr)
        history.append(_row(step, epoch, lr, bd))
        if callback:
            callback(step, model)
    last_epoch = (total_steps - 1) // cfg.steps_per_epoch + 1 if total_steps else 0
    ckpt = make_checkpoint(model, cfg, opt, last_epoch)
    log.info("trained %s for %d steps, final total %.4f", cfg.scheme, total_steps,
             history[-1]["total"] if history else float("nan"))
    return TrainResult(model, ckpt, history, stats)


def train_landmark(model, data, cfg: TrainConfig, **kw) -> TrainResult:
    return train(model, data, replace(cfg, scheme="landmark"), **kw)


def train_orientation(model, data, cfg: TrainConfig, **kw) -> TrainResult:
    return train(model, data, replace(cfg, scheme="orientation"), **kw)


def write_history(path, history):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HISTORY_HEADER)
        for row in history:
            w.writerow([row["step"], row["epoch"], repr(row["lr"])] + [repr(row[k]) for k in HISTORY_HEADER[3:]])
