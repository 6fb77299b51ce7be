"""Independent oracles and the self-check suites behind ``vbranch verify``.

The oracles here deliberately avoid the code paths they check: gradients
are compared with central finite differences, the batch-hard loss and the
retrieval metrics with plain-Python enumeration.
"""

from __future__ import annotations

import itertools
import math
import time

import numpy as np

from . import tensor as T

FD_STEP = 1e-5
GRAD_TOL = 1e-4


# -------------------------------------------------------------- gradients

def numeric_grad(f, arrays, index: int, h: float = FD_STEP) -> np.ndarray:
    """Central-difference gradient of scalar ``f(*arrays)`` w.r.t. ``arrays[index]``."""
    base = [np.array(a, dtype=np.float64, copy=True) for a in arrays]
    target = base[index]
    grad = np.zeros_like(target)
    it = np.nditer(target, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = target[idx]
        target[idx] = orig + h
        up = f(*base)
        target[idx] = orig - h
        down = f(*base)
        target[idx] = orig
        grad[idx] = (up - down) / (2 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Largest absolute deviation scaled by the larger gradient magnitude."""
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0))
    if scale == 0:
        return 0.0
    return float(np.abs(analytic - numeric).max() / scale)


def gradcheck(build, arrays, h: float = FD_STEP) -> float:
    """Max relative error over every input of ``build(*Values) -> scalar Value``."""
    leaves = [T.Value(np.array(a, dtype=np.float64)) for a in arrays]
    out = build(*leaves)
    out.backward()

    def f(*raw):
        with T.no_grad():
            return float(build(*[T.Value(r) for r in raw]).data)

    worst = 0.0
    for i, leaf in enumerate(leaves):
        analytic = leaf.grad if leaf.grad is not None else np.zeros(leaf.shape)
        worst = max(worst, relative_error(analytic, numeric_grad(f, arrays, i, h)))
    return worst


def _weighted(rng, shape):
    w = rng.normal(size=shape)
    return lambda v: T.vsum(T.mul(v, w))


def gradient_cases(rng: np.random.Generator) -> dict:
    """Named ``(build, arrays)`` cases covering each differentiable op and both composite losses."""
    from .objectives import localization_loss, normalize_activation, triplet_loss_batch_hard

    cases = {}
    w = _weighted(rng, (1, 4, 4, 3))
    cases["conv2d_same"] = (lambda x, k: w(T.conv2d(x, k, 1, "same")),
                            [rng.normal(size=(1, 4, 4, 2)), rng.normal(size=(3, 3, 2, 3))])
    w2 = _weighted(rng, (2, 2, 2, 2))
    cases["conv2d_valid_s2"] = (lambda x, k: w2(T.conv2d(x, k, 2, "valid")),
                                [rng.normal(size=(2, 5, 5, 2)), rng.normal(size=(2, 2, 2, 2))])
    w3 = _weighted(rng, (3, 4))
    cases["dense"] = (lambda x, a, c: w3(T.dense(x, a, c)),
                      [rng.normal(size=(3, 5)), rng.normal(size=(5, 4)), rng.normal(size=(4,))])
    w4 = _weighted(rng, (6, 3))
    cases["batchnorm_train"] = (lambda x, g, b: w4(T.batchnorm(x, g, b, "train")),
                                [rng.normal(size=(6, 3)) * 2 + 1, rng.normal(size=(3,)), rng.normal(size=(3,))])
    rm, rv = rng.normal(size=3), rng.uniform(0.5, 2.0, size=3)
    cases["batchnorm_infer"] = (lambda x, g, b: w4(T.batchnorm(x, g, b, "infer", rm, rv)),
                                [rng.normal(size=(6, 3)), rng.normal(size=(3,)), rng.normal(size=(3,))])
    w5 = _weighted(rng, (2, 3, 3, 4))
    cases["relu"] = (lambda x: w5(T.relu(x)), [rng.normal(size=(2, 3, 3, 4))])
    w6 = _weighted(rng, (2, 4))
    cases["global_avg_pool"] = (lambda x: w6(T.global_avg_pool(x)), [rng.normal(size=(2, 3, 3, 4))])
    mask = (rng.uniform(size=4) > 0.5).astype(float)
    cases["scale_mask"] = (lambda x: w5(T.scale_mask(x, mask)), [rng.normal(size=(2, 3, 3, 4))])
    w7 = _weighted(rng, (2, 7))
    cases["concat"] = (lambda a, b: w7(T.concat([a, b], axis=1)),
                       [rng.normal(size=(2, 3)), rng.normal(size=(2, 4))])
    w8 = _weighted(rng, (2, 8, 4))
    cases["bilinear_resize"] = (lambda x: w8(T.bilinear_resize(x, (8, 4))), [rng.normal(size=(2, 3, 2))])
    w9 = _weighted(rng, (5, 5))
    cases["pairwise_l1"] = (lambda e: w9(T.pairwise_l1(e)), [rng.normal(size=(5, 3))])
    w10 = _weighted(rng, (3, 4))
    cases["div"] = (lambda a, b: w10(T.div(a, b)), [rng.normal(size=(3, 4)), rng.uniform(0.5, 2, size=(3, 1))])
    w11 = _weighted(rng, (3,))
    cases["amax"] = (lambda x: w11(T.amax(x, axis=1)), [rng.normal(size=(3, 5))])
    cases["amin"] = (lambda x: w11(T.amin(x, axis=1)), [rng.normal(size=(3, 5))])
    w12 = _weighted(rng, (2, 8, 4))
    cases["normalize_activation"] = (lambda a: w12(normalize_activation(a, dims=(8, 4))),
                                     [rng.normal(size=(2, 4, 2, 3))])
    labels = np.repeat(np.arange(3), 2)
    cases["triplet_loss"] = (lambda e: triplet_loss_batch_hard(e, labels, 0.2),
                             [rng.normal(size=(6, 4)) * 0.3])
    grids = rng.uniform(size=(3, 8, 4))
    cases["localization_loss"] = (lambda a: localization_loss(a, list(grids)),
                                  [rng.normal(size=(3, 4, 2, 3))])
    return cases


# ------------------------------------------------------------ triplet oracle

def brute_force_batch_hard(embeddings, labels, margin: float) -> float:
    """Enumerate every anchor's positives and negatives with Python loops."""
    e = [list(map(float, row)) for row in np.asarray(embeddings)]
    labels = list(labels)
    total = 0.0
    for a in range(len(e)):
        pos, neg = [], []
        for j in range(len(e)):
            d = 0.0
            for u, v in zip(e[a], e[j]):
                d += abs(u - v)
            (pos if labels[j] == labels[a] else neg).append(d)
        total += max(margin + max(pos) - min(neg), 0.0)
    return total


# ------------------------------------------------------------ ranking oracle

def brute_force_ranking(q_emb, q_ids, q_cams, g_emb, g_ids, g_cams, g_names):
    """Return ``(cmc list, mAP, skipped count)`` by explicit enumeration."""
    n_g = len(g_ids)
    cmc = [0.0] * n_g
    aps, skipped = [], 0
    for qi in range(len(q_ids)):
        items = []
        for gi in range(n_g):
            d = math.sqrt(sum((float(a) - float(b)) ** 2 for a, b in zip(q_emb[qi], g_emb[gi])))
            items.append((d, g_names[gi], gi))
        items.sort()
        valid = [gi for _, _, gi in items
                 if g_ids[gi] >= 0 and not (g_ids[gi] == q_ids[qi] and g_cams[gi] == q_cams[qi])]
        hits = [r for r, gi in enumerate(valid, 1) if g_ids[gi] == q_ids[qi]]
        if not hits:
            skipped += 1
            continue
        for r in range(hits[0], n_g + 1):
            cmc[r - 1] += 1
        aps.append(sum(k / r for k, r in enumerate(hits, 1)) / len(hits))
    n = len(aps)
    return [c / n for c in cmc] if n else cmc, (sum(aps) / n if n else 0.0), skipped


# ------------------------------------------------------------------ suites

def suite_gradients(seeds=range(20)):
    worst, where = 0.0, ""
    for s in seeds:
        for name, (build, arrays) in gradient_cases(np.random.default_rng(s)).items():
            err = gradcheck(build, arrays)
            if err > worst:
                worst, where = err, f"{name}@seed{s}"
    return worst < GRAD_TOL, f"max rel err {worst:.2e} ({where})"


def suite_partitions():
    from .branching import branch_mask, make_partition

    checked = 0
    for d, b, delta in itertools.product((8, 12, 100, 128), range(1, 7), (0.0, 0.25, 0.5, 1.0)):
        if d < b:
            continue
        p = make_partition(d, b, delta)
        every = list(p.shared_idx) + [i for u in p.unique_idx for i in u]
        if sorted(every) != list(range(d)):
            return False, f"totality/disjointness failed for d={d} b={b} delta={delta}"
        if p.sigma + b * p.omega + p.remainder != d:
            return False, f"count identity failed for d={d} b={b} delta={delta}"
        if p.omega > 0 and abs(delta - p.sigma / (p.sigma + p.omega)) > 1 / (p.sigma + p.omega):
            return False, f"delta recovery failed for d={d} b={b} delta={delta}"
        if delta == 0 and (p.sigma != 0 or p.omega != d // b):
            return False, f"delta=0 special case failed for d={d} b={b}"
        for i in range(1, b + 1):
            m = branch_mask(p, i)
            if not np.array_equal(m * m, m):
                return False, "mask idempotence failed"
        checked += 1
    return True, f"{checked} partitions"


def random_triplet_batch(rng, dyadic: bool = True):
    """Small random P x K batch.  With ``dyadic`` the embeddings lie on a
    1/64 grid so every distance and partial sum is exact in float64 and the
    loss no longer depends on summation order."""
    P, K = int(rng.integers(2, 5)), int(rng.integers(2, 5))
    shape = (P * K, int(rng.integers(1, 9)))
    e = rng.integers(-128, 129, size=shape) / 64.0 if dyadic else rng.normal(size=shape)
    labels = np.repeat(rng.permutation(10)[:P], K)
    return e, labels


def suite_triplet(trials: int = 200):
    from .objectives import triplet_loss_batch_hard

    rng = np.random.default_rng(1234)
    for t in range(trials):
        e, labels = random_triplet_batch(rng)
        got = float(triplet_loss_batch_hard(e, labels, 0.25).data)
        want = brute_force_batch_hard(e, labels, 0.25)
        if got != want:
            return False, f"trial {t}: {got!r} != {want!r}"
    e = np.array([[0.0], [0.1], [0.3], [0.5]])
    hand = float(triplet_loss_batch_hard(e, [0, 0, 1, 1], 0.2).data)
    if hand != brute_force_batch_hard(e, [0, 0, 1, 1], 0.2) or not math.isclose(hand, 0.3, rel_tol=1e-15):
        return False, f"hand example gave {hand!r}"
    return True, f"{trials} random batches exact"


def suite_heatmap_orientation():
    from .datapipe import KeypointRecord, assign_subset, orientation_angle
    from .objectives import make_heatmap

    h = make_heatmap((2, 4), 1.0, (8, 4)).grid
    if h[4, 2] != 0 or abs(h[4, 3] - (1 - math.exp(-1))) > 1e-9:
        return False, "heatmap values"
    cases = [(((6, 2), (0, 2)), math.acos(0.75), "front"),
             (((4, 2), (3, 2)), math.acos(0.125), "side"),
             (((0, 2), (6, 2)), math.acos(-0.75), "back")]
    for (rs, ls), theta, subset in cases:
        kp = KeypointRecord("x", {"right_shoulder": (*rs, 1.0), "left_shoulder": (*ls, 1.0),
                                  "right_hip": (rs[0], rs[1] + 8, 1.0), "left_hip": (ls[0], ls[1] + 8, 1.0)})
        got = orientation_angle(kp)
        if abs(got - theta) > 1e-9 or assign_subset(got) != subset:
            return False, f"orientation {rs},{ls}: {got}"
    return True, "heatmap and orientation examples"


def suite_lr():
    from .trainer import lr_at

    ok = lr_at(50, 3e-4, 50) == 3e-4 and lr_at(65, 3e-4, 50) == 1.5e-4 and lr_at(150, 3e-4, 50) == 3e-4 / 1024
    return ok, "lr_at(50/65/150)"


def suite_ranking(trials: int = 100):
    from .evaluator import EmbeddingIndex, rank_queries

    rng = np.random.default_rng(99)
    for t in range(trials):
        nq, ng = int(rng.integers(1, 4)), int(rng.integers(2, 8))
        qe, ge = rng.normal(size=(nq, 2)), rng.normal(size=(ng, 2))
        qi, gi = rng.integers(0, 3, nq), rng.integers(-1, 3, ng)
        qc, gc = rng.integers(0, 2, nq), rng.integers(0, 2, ng)
        names = [f"g{j}" for j in range(ng)]
        q = EmbeddingIndex([f"q{j}" for j in range(nq)], qi, qc, qe)
        g = EmbeddingIndex(names, gi, gc, ge)
        rep = rank_queries(q, g)
        cmc, m, skipped = brute_force_ranking(qe, qi, qc, ge, gi, gc, names)
        if len(rep.skipped) != skipped or (rep.ap and (list(rep.cmc) != cmc or rep.map != m)):
            return False, f"trial {t} mismatch"
    return True, f"{trials} random instances exact"


SUITES = {
    "gradients": suite_gradients,
    "partitions": suite_partitions,
    "triplet-oracle": suite_triplet,
    "heatmap-orientation": suite_heatmap_orientation,
    "lr-schedule": suite_lr,
    "ranking-oracle": suite_ranking,
}


def run_all():
    results = []
    for name, fn in SUITES.items():
        t = time.perf_counter()
        ok, detail = fn()
        results.append((name, bool(ok), detail, time.perf_counter() - t))
    return results
