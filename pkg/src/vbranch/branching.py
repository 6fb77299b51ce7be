"""Virtual branches: neuron partitions, drop masks and the masked model.

A layer of ``d`` neurons is split into a shared set of ``sigma`` neurons and
``b`` disjoint unique sets of ``omega`` neurons each, from the sharing degree
``delta = sigma / (sigma + omega)``.  Branch ``i`` sees the shared set plus
its own unique set; everything else is multiplied by 0 on that branch's
forward pass.  Indices are 0-based in code; branch numbers are 1-based.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from . import tensor as T
from .errors import ModelError, PartitionError, ShapeError
from .tensor import Parameter, Value


@dataclass(frozen=True)
class LayerPartition:
    layer_id: str
    d: int
    b: int
    sigma: int
    omega: int
    remainder: int
    shared_idx: tuple
    unique_idx: tuple  # b tuples

    def active_idx(self, i: int) -> np.ndarray:
        """Sorted indices visible to branch ``i`` (1-based)."""
        _check_branch(self, i)
        return np.array(sorted(self.shared_idx + self.unique_idx[i - 1]), dtype=np.intp)

    def active_count(self) -> int:
        return len(self.shared_idx) + self.omega


def _as_fraction(delta) -> Fraction:
    # limit_denominator turns 0.1 into 1/10 rather than its binary expansion
    return Fraction(delta).limit_denominator(10**6)


def make_partition(d: int, b: int, delta: float, layer_id: str = "") -> LayerPartition:
    """Split ``d`` neurons among ``b`` branches with sharing degree ``delta``.

    ``sigma = floor(d / (1 - b (1 - 1/delta)))`` and
    ``omega = floor((1/delta - 1) sigma)`` for ``delta > 0``; for
    ``delta = 0``, ``sigma = 0`` and ``omega = floor(d / b)``.  Leftover
    neurons from the floors join the shared set, so every neuron stays
    active on some branch.
    """
    if int(b) != b or b < 1:
        raise PartitionError(f"branch count must be a positive integer, got {b}")
    if int(d) != d or d < 1:
        raise PartitionError(f"neuron count must be a positive integer, got {d}")
    d, b = int(d), int(b)
    if d < b:
        raise PartitionError(f"cannot split {d} neurons into {b} branches")
    if not 0.0 <= delta <= 1.0:
        raise PartitionError(f"delta must lie in [0, 1], got {delta}")
    frac = _as_fraction(delta)
    if frac == 0:
        sigma, omega = 0, d // b
    else:
        inv = 1 / frac
        sigma = math.floor(Fraction(d) / (1 - b * (1 - inv)))
        omega = math.floor((inv - 1) * sigma)
    remainder = d - sigma - b * omega
    shared = tuple(range(sigma)) + tuple(range(sigma + b * omega, d))
    unique = tuple(tuple(range(sigma + k * omega, sigma + (k + 1) * omega)) for k in range(b))
    return LayerPartition(layer_id, d, b, sigma, omega, remainder, shared, unique)


def _check_branch(p: LayerPartition, i: int):
    if not 1 <= i <= p.b:
        raise PartitionError(f"branch {i} out of range 1..{p.b}")


def branch_mask(p: LayerPartition, i: int) -> np.ndarray:
    """0/1 vector of length ``d``: 1 where the neuron belongs to branch ``i``."""
    _check_branch(p, i)
    mask = np.zeros(p.d)
    mask[list(p.shared_idx)] = 1.0
    mask[list(p.unique_idx[i - 1])] = 1.0
    return mask


@dataclass(frozen=True)
class BranchPlan:
    b: int
    delta: float
    layers: tuple  # of LayerPartition, in forward order

    @classmethod
    def build(cls, layer_dims, b: int, delta: float) -> "BranchPlan":
        """``layer_dims`` is an ordered iterable of ``(layer_id, d)``."""
        return cls(b, delta, tuple(make_partition(d, b, delta, lid) for lid, d in layer_dims))

    def layer(self, layer_id: str) -> LayerPartition:
        for p in self.layers:
            if p.layer_id == layer_id:
                return p
        raise ModelError(f"plan has no layer {layer_id!r}")

    def branch_neurons(self, i: int) -> dict:
        """The neuron set of branch ``i``, as ``{layer_id: indices}``."""
        return {p.layer_id: p.active_idx(i) for p in self.layers}

    def embedding_dims(self) -> list:
        last = self.layers[-1]
        return [last.active_count()] * self.b

    def table(self) -> str:
        """Human-readable partition table (1-based neuron numbers)."""
        rows = [("layer", "d", "sigma", "omega", "remainder", "shared", *[f"branch{i}" for i in range(1, self.b + 1)])]
        for p in self.layers:
            rows.append((p.layer_id, str(p.d), str(p.sigma), str(p.omega), str(p.remainder),
                         _ranges(p.shared_idx), *[_ranges(u) for u in p.unique_idx]))
        widths = [max(len(r[c]) for r in rows) for c in range(len(rows[0]))]
        return "\n".join("  ".join(cell.ljust(w) for cell, w in zip(r, widths)).rstrip() for r in rows)


def _ranges(idx) -> str:
    """Compress 0-based indices to 1-based ranges, e.g. ``1-4,9``."""
    if not idx:
        return "-"
    idx = sorted(idx)
    parts, start, prev = [], idx[0], idx[0]
    for v in idx[1:] + [None]:
        if v is not None and v == prev + 1:
            prev = v
            continue
        parts.append(f"{start + 1}" if start == prev else f"{start + 1}-{prev + 1}")
        if v is not None:
            start = prev = v
    return ",".join(parts)


# ----------------------------------------------------------------- the model

@dataclass
class ModelConfig:
    """Toy backbone: a shared conv stem, then the branched block and head.

    The stem has three stride stages (the first holds two convs) and stands
    in for the early dense blocks; the branched block is two convs followed
    by global pooling and the two fully-connected head layers.
    """

    input_shape: tuple = (32, 16, 3)
    stem_channels: tuple = (16, 16, 32, 32)
    stem_strides: tuple = (1, 1, 2, 2)
    block_channels: tuple = (32, 32)
    block_kernels: tuple = (3, 1)
    hidden: int = 256
    embed: int = 128
    bn_momentum: float = 0.99
    bn_epsilon: float = 1e-5

    def branched_layers(self) -> list:
        dims = [(f"block.conv{j}", c) for j, c in enumerate(self.block_channels, 1)]
        return dims + [("head.fc1", self.hidden), ("head.fc2", self.embed)]

    def pre_pool_shape(self) -> tuple:
        h, w, _ = self.input_shape
        for s in self.stem_strides:
            h, w = -(-h // s), -(-w // s)
        return h, w, self.block_channels[-1]


def _he(rng, shape, fan_in):
    return rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)


class BranchedModel:
    """Masked multi-branch model.

    Trainable parameters do not depend on the plan: the masks are constants,
    so any ``(b, delta)`` gives the same parameter count as the baseline.
    Batchnorm layers inside the branched block keep running statistics per
    branch (non-trainable buffers of shape ``[b, C]``).
    """

    def __init__(self, config: ModelConfig, plan: BranchPlan, rng: np.random.Generator):
        self.config = config
        self.plan = plan
        self._check_plan()
        self.params: dict[str, Parameter] = {}
        self.buffers: dict[str, np.ndarray] = {}
        cin = config.input_shape[2]
        for j, cout in enumerate(config.stem_channels, 1):
            self._add(f"stem.conv{j}.kernel", _he(rng, (3, 3, cin, cout), 9 * cin))
            self._add_bn(f"stem.bn{j}", cout, 1)
            cin = cout
        for j, (cout, k) in enumerate(zip(config.block_channels, config.block_kernels), 1):
            self._add(f"block.conv{j}.kernel", _he(rng, (k, k, cin, cout), k * k * cin))
            self._add_bn(f"block.bn{j}", cout, plan.b)
            cin = cout
        self._add("head.fc1.weight", _he(rng, (cin, config.hidden), cin))
        self._add("head.fc1.bias", np.zeros(config.hidden))
        self._add_bn("head.bn1", config.hidden, plan.b)
        self._add("head.fc2.weight", rng.normal(0.0, math.sqrt(1.0 / config.hidden), (config.hidden, config.embed)))
        self._add("head.fc2.bias", np.zeros(config.embed))
        self._masks = {
            p.layer_id: [branch_mask(p, i) for i in range(1, plan.b + 1)] for p in plan.layers
        }

    def _check_plan(self):
        want = self.config.branched_layers()
        got = [(p.layer_id, p.d) for p in self.plan.layers]
        if want != got:
            raise ModelError(f"plan layers {got} do not match model layers {want}")

    def _add(self, name, data):
        if name in self.params:
            raise ModelError(f"duplicate parameter {name}")
        self.params[name] = Parameter(name, data)

    def _add_bn(self, prefix, c, branches):
        self._add(f"{prefix}.gamma", np.ones(c))
        self._add(f"{prefix}.beta", np.zeros(c))
        self.buffers[f"{prefix}.running_mean"] = np.zeros((branches, c))
        self.buffers[f"{prefix}.running_var"] = np.ones((branches, c))

    # ------------------------------------------------------------ bookkeeping
    def trainable(self) -> list:
        return [p for p in self.params.values() if p.trainable]

    def parameter_count(self) -> int:
        return sum(int(np.prod(p.shape)) for p in self.trainable())

    def zero_grad(self):
        for p in self.params.values():
            p.value.zero_grad()

    def snap_float32(self):
        """Round parameters and buffers to float32-representable values."""
        for p in self.params.values():
            p.assign(p.data.astype(np.float32).astype(np.float64))
        for k, v in self.buffers.items():
            self.buffers[k] = v.astype(np.float32).astype(np.float64)

    def with_plan(self, plan: BranchPlan) -> "BranchedModel":
        """A model sharing this one's weights under a different plan."""
        other = object.__new__(BranchedModel)
        other.config = self.config
        other.plan = plan
        other._check_plan()
        other.params = self.params
        other.buffers = {k: np.repeat(v[:1], plan.b, axis=0) if v.shape[0] != 1 else v
                         for k, v in self.buffers.items()}
        other._masks = {p.layer_id: [branch_mask(p, i) for i in range(1, plan.b + 1)] for p in plan.layers}
        return other

    # ---------------------------------------------------------------- forward
    def _bn(self, x: Value, prefix: str, slot: int, train: bool) -> Value:
        cfg = self.config
        rm_key, rv_key = f"{prefix}.running_mean", f"{prefix}.running_var"
        rm, rv = self.buffers[rm_key], self.buffers[rv_key]
        if train:
            nm, nv = T.updated_running_stats(x, rm[slot], rv[slot], cfg.bn_momentum)
            rm, rv = rm.copy(), rv.copy()
            rm[slot], rv[slot] = nm, nv
            self.buffers[rm_key], self.buffers[rv_key] = rm, rv
            return T.batchnorm(x, self.params[f"{prefix}.gamma"].value, self.params[f"{prefix}.beta"].value,
                               "train", epsilon=cfg.bn_epsilon)
        return T.batchnorm(x, self.params[f"{prefix}.gamma"].value, self.params[f"{prefix}.beta"].value,
                           "infer", rm[slot], rv[slot], epsilon=cfg.bn_epsilon)

    def _check_input(self, x: Value):
        if x.ndim != 4 or tuple(x.shape[1:]) != tuple(self.config.input_shape):
            raise ShapeError(f"expected input [N, {', '.join(map(str, self.config.input_shape))}], got {x.shape}")

    def stem(self, x, train: bool = False) -> Value:
        x = T.as_value(x)
        self._check_input(x)
        h = x
        for j, s in enumerate(self.config.stem_strides, 1):
            h = T.conv2d(h, self.params[f"stem.conv{j}.kernel"].value, stride=s, padding="same")
            h = T.relu(self._bn(h, f"stem.bn{j}", 0, train))
        return h

    def branch(self, h: Value, i: int, train: bool = False, masked: bool = True):
        """Run the branched block and head for branch ``i`` on stem output ``h``.

        Returns ``(embedding, pre_pool)``.  With ``masked`` the embedding keeps
        only branch ``i``'s final-layer coordinates and ``pre_pool`` only its
        active channels; without it this is the plain unbranched baseline.
        """
        if not 1 <= i <= self.plan.b:
            raise ModelError(f"branch {i} out of range 1..{self.plan.b}")
        slot = i - 1

        def mask(t, layer_id):
            return T.scale_mask(t, self._masks[layer_id][slot]) if masked else t

        for j in range(1, len(self.config.block_channels) + 1):
            h = T.conv2d(h, self.params[f"block.conv{j}.kernel"].value, stride=1, padding="same")
            h = mask(T.relu(self._bn(h, f"block.bn{j}", slot, train)), f"block.conv{j}")
        last_conv = f"block.conv{len(self.config.block_channels)}"
        pre_pool = T.take(h, self.plan.layer(last_conv).active_idx(i), axis=3) if masked else h
        g = T.global_avg_pool(h)
        f = T.dense(g, self.params["head.fc1.weight"].value, self.params["head.fc1.bias"].value)
        f = mask(T.relu(self._bn(f, "head.bn1", slot, train)), "head.fc1")
        e = T.dense(f, self.params["head.fc2.weight"].value, self.params["head.fc2.bias"].value)
        if masked:
            # dropping the masked coordinates is the fc2 drop mask plus discard
            e = T.take(e, self.plan.layer("head.fc2").active_idx(i), axis=1)
        return e, pre_pool

    def forward_branches(self, x, train: bool = False) -> list:
        h = self.stem(x, train)
        return [self.branch(h, i, train)[0] for i in range(1, self.plan.b + 1)]

    def forward_with_activations(self, x, train: bool = False):
        h = self.stem(x, train)
        outs = [self.branch(h, i, train) for i in range(1, self.plan.b + 1)]
        return [o[0] for o in outs], [o[1] for o in outs]

    def embed(self, x, train: bool = False) -> Value:
        return concat_embeddings(self.forward_branches(x, train))

    def forward_baseline(self, x, train: bool = False) -> Value:
        """The unmasked network (branch-1 batchnorm statistics)."""
        return self.branch(self.stem(x, train), 1, train, masked=False)[0]

    def branch_exclusive_slices(self, i: int) -> list:
        """``(param_name, index)`` pairs whose values only reach branch ``i``.

        These are the output-side weights of neurons unique to branch ``i`` in
        the branched block, plus the input-side weights reading from them.
        """
        out = []
        prev = None
        convs = len(self.config.block_channels)
        for j in range(1, convs + 1):
            p = self.plan.layer(f"block.conv{j}")
            u = np.array(p.unique_idx[i - 1], dtype=np.intp)
            if u.size:
                out.append((f"block.conv{j}.kernel", (Ellipsis, u)))
                out.append((f"block.bn{j}.gamma", (u,)))
                out.append((f"block.bn{j}.beta", (u,)))
            if prev is not None and prev.size:
                out.append((f"block.conv{j}.kernel", (slice(None), slice(None), prev)))
            prev = u
        p1 = self.plan.layer("head.fc1")
        u1 = np.array(p1.unique_idx[i - 1], dtype=np.intp)
        if u1.size:
            out += [("head.fc1.weight", (slice(None), u1)), ("head.fc1.bias", (u1,)),
                    ("head.bn1.gamma", (u1,)), ("head.bn1.beta", (u1,)),
                    ("head.fc2.weight", (u1,))]
        if prev is not None and prev.size:
            out.append(("head.fc1.weight", (prev,)))
        p2 = self.plan.layer("head.fc2")
        u2 = np.array(p2.unique_idx[i - 1], dtype=np.intp)
        if u2.size:
            out += [("head.fc2.weight", (slice(None), u2)), ("head.fc2.bias", (u2,))]
        return out


def build_model(config: ModelConfig, b: int, delta: float, rng: np.random.Generator) -> BranchedModel:
    plan = BranchPlan.build(config.branched_layers(), b, delta)
    return BranchedModel(config, plan, rng)


def concat_embeddings(embeddings) -> Value:
    """Concatenate per-branch embeddings in branch order 1..b."""
    embeddings = list(embeddings)
    if not embeddings:
        raise ShapeError("no embeddings to concatenate")
    n = embeddings[0].shape[0]
    if any(e.shape[0] != n for e in embeddings):
        raise ShapeError(f"batch dims differ: {[e.shape[0] for e in embeddings]}")
    if len(embeddings) == 1:
        return embeddings[0]
    return T.concat(embeddings, axis=1)
