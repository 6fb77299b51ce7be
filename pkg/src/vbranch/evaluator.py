"""Retrieval evaluation: flip-averaged embeddings, CMC and mAP, branch timing."""

from __future__ import annotations

import csv
import io
import statistics
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .branching import BranchedModel, ModelConfig, build_model
from .errors import ModelError, ShapeError

REPORT_RANKS = (1, 5, 10)


@dataclass
class EmbeddingIndex:
    sample_ids: list
    identities: np.ndarray
    cameras: np.ndarray
    embeddings: np.ndarray  # [N, E]

    def __post_init__(self):
        n = len(self.sample_ids)
        if self.embeddings.ndim != 2 or self.embeddings.shape[0] != n:
            raise ShapeError(f"{n} rows but embeddings {self.embeddings.shape}")
        if len(self.identities) != n or len(self.cameras) != n:
            raise ShapeError("identities/cameras length mismatch")
        if not np.all(np.isfinite(self.embeddings)):
            raise ValueError("non-finite embedding")

    @classmethod
    def from_records(cls, records, embeddings):
        return cls([r.sample_id for r in records], np.array([r.identity for r in records]),
                   np.array([r.camera for r in records]), np.asarray(embeddings, dtype=np.float64))


def mirror(x: np.ndarray) -> np.ndarray:
    """Reverse the width axis of ``[N, H, W, C]`` (or ``[H, W, C]``) images."""
    return x[..., ::-1, :]


def embed_arrays(model: BranchedModel, images: np.ndarray, flip: bool = False, batch_size: int = 256) -> np.ndarray:
    """Inference-mode concatenated embeddings; with ``flip`` average with the mirrored image."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 4 or tuple(images.shape[1:]) != tuple(model.config.input_shape):
        raise ModelError(f"images {images.shape} do not fit model input {model.config.input_shape}")
    out = []
    with T.no_grad():
        for lo in range(0, len(images), batch_size):
            x = images[lo : lo + batch_size]
            e = model.embed(T.Value(x)).data
            if flip:
                e = 0.5 * (e + model.embed(T.Value(np.ascontiguousarray(mirror(x)))).data)
            out.append(e)
    return np.concatenate(out) if out else np.zeros((0, sum(model.plan.embedding_dims())))


def embed(model: BranchedModel, dataset, records, flip: bool = False) -> EmbeddingIndex:
    return EmbeddingIndex.from_records(records, embed_arrays(model, dataset.stack([r.sample_id for r in records]), flip))


def euclidean_distances(q: np.ndarray, g: np.ndarray) -> np.ndarray:
    # direct differences keep D(a, a) exactly 0 and D symmetric
    return np.sqrt(((q[:, None, :] - g[None, :, :]) ** 2).sum(axis=-1))


@dataclass
class RankingReport:
    query_ids: list
    ranked: list  # per scored query: gallery sample_ids after exclusions, best first
    ap: list  # per scored query
    cmc: np.ndarray  # cmc[r-1] = fraction with first hit at rank <= r
    map: float
    skipped: list = field(default_factory=list)  # query ids with no valid match

    def rank(self, r: int) -> float:
        if len(self.cmc) == 0:
            return 0.0
        return float(self.cmc[min(r, len(self.cmc)) - 1])

    def metrics(self) -> dict:
        out = {"mAP": self.map}
        out.update({f"rank-{r}": self.rank(r) for r in REPORT_RANKS})
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", "value"])
        for k, v in self.metrics().items():
            w.writerow([k, f"{v:.6f}"])
        return buf.getvalue()

    def per_query_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["query_id", "ap"])
        for q, a in zip(self.query_ids, self.ap):
            w.writerow([q, f"{a:.6f}"])
        return buf.getvalue()

    def to_text(self) -> str:
        lines = [f"queries scored: {len(self.query_ids)}  skipped: {len(self.skipped)}"]
        lines += [f"{k:<8} {v:8.4f}" for k, v in self.metrics().items()]
        return "\n".join(lines) + "\n"


def _score_query(qi, dist_row, query: EmbeddingIndex, gallery: EmbeddingIndex, order_key):
    qid, qcam = query.identities[qi], query.cameras[qi]
    order = np.lexsort((order_key, dist_row))
    gid, gcam = gallery.identities[order], gallery.cameras[order]
    keep = (gid >= 0) & ~((gid == qid) & (gcam == qcam))
    order, gid = order[keep], gid[keep]
    hits = gid == qid
    if not hits.any():
        return None
    positions = np.flatnonzero(hits) + 1  # 1-based ranks of relevant items
    ap = float(np.mean(np.arange(1, len(positions) + 1) / positions))
    return [gallery.sample_ids[j] for j in order], int(positions[0]), ap


def rank_queries(query: EmbeddingIndex, gallery: EmbeddingIndex, metric: str = "euclidean", threads: int = 1) -> RankingReport:
    """Single-query ranking with same-identity-same-camera and junk exclusion.

    Ties in distance break by ascending gallery sample_id.  AP is the mean of
    precision at each relevant hit.
    """
    if metric != "euclidean":
        raise ValueError(f"unsupported metric {metric!r}")
    if len(query.sample_ids) == 0 or len(gallery.sample_ids) == 0:
        raise ValueError("query and gallery must be non-empty")
    if query.embeddings.shape[1] != gallery.embeddings.shape[1]:
        raise ShapeError("query and gallery embedding dims differ")
    dist = euclidean_distances(query.embeddings, gallery.embeddings)
    order_key = np.argsort(np.argsort(np.array(gallery.sample_ids), kind="stable"), kind="stable")
    jobs = range(len(query.sample_ids))
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(lambda qi: _score_query(qi, dist[qi], query, gallery, order_key), jobs))
    else:
        results = [_score_query(qi, dist[qi], query, gallery, order_key) for qi in jobs]
    n_gallery = len(gallery.sample_ids)
    cmc = np.zeros(n_gallery)
    qids, ranked, aps, skipped = [], [], [], []
    for qi, res in zip(jobs, results):
        if res is None:
            skipped.append(query.sample_ids[qi])
            continue
        lst, first, ap = res
        qids.append(query.sample_ids[qi])
        ranked.append(lst)
        aps.append(ap)
        cmc[first - 1 :] += 1
    if qids:
        cmc /= len(qids)
    return RankingReport(qids, ranked, aps, cmc, float(np.mean(aps)) if aps else 0.0, skipped)


def evaluate(model: BranchedModel, dataset, flip: bool = False, threads: int = 1) -> RankingReport:
    q = dataset.manifest.split("query")
    g = dataset.manifest.split("gallery")
    return rank_queries(embed(model, dataset, q, flip), embed(model, dataset, g, flip), threads=threads)


# ---------------------------------------------------------------- benchmark

BENCH_HEADER = ("b", "train_s_per_epoch", "infer_s_per_1k", "flops_fwd")


def static_flops(config: ModelConfig, b: int, n: int = 1) -> dict:
    """Inference-mode forward op count derived from layer shapes alone.

    Returns ``{"stem": ..., "branch": ..., "total": stem + b * branch}``
    under the conventions documented on :class:`vbranch.tensor.FlopCounter`.
    """
    h, w, cin = config.input_shape
    stem = 0
    for cout, s in zip(config.stem_channels, config.stem_strides):
        h, w = -(-h // s), -(-w // s)
        stem += 2 * n * h * w * 9 * cin * cout  # conv
        stem += 4 * n * h * w * cout + n * h * w * cout  # batchnorm, relu
        cin = cout
    branch = 0
    for cout, k in zip(config.block_channels, config.block_kernels):
        branch += 2 * n * h * w * k * k * cin * cout + 5 * n * h * w * cout
        cin = cout
    branch += n * h * w * cin  # pooling
    branch += 2 * n * cin * config.hidden + n * config.hidden  # fc1 + bias
    branch += 5 * n * config.hidden  # batchnorm + relu
    branch += 2 * n * config.hidden * config.embed + n * config.embed  # fc2 + bias
    return {"stem": stem, "branch": branch, "total": stem + b * branch}


def measured_flops(model: BranchedModel, n: int = 1) -> int:
    x = np.zeros((n,) + tuple(model.config.input_shape))
    with T.no_grad(), T.count_flops() as counter:
        model.embed(T.Value(x))
    return counter.total


def bench_branches(config: ModelConfig, branches=range(1, 9), reps: int = 5, delta: float = 0.0,
                   batch: int = 18, infer_samples: int = 1000, steps_per_epoch: int = 100,
                   seed: int = 0) -> list:
    """Median train-step and inference timings per branch count.

    Every model is built from the same seed, so the stem weights match
    across ``b``.  A training step is one forward/backward of a ``batch``
    sized input through all branches with a batch-hard loss on the
    concatenated embedding.
    """
    from .objectives import triplet_loss_batch_hard

    rng = np.random.default_rng(seed)
    x_train = rng.normal(size=(batch,) + tuple(config.input_shape))
    labels = np.repeat(np.arange(max(batch // 3, 2)), 3)[:batch]
    x_inf = rng.normal(size=(infer_samples,) + tuple(config.input_shape))
    rows = []
    for b in sorted(branches):
        model = build_model(config, b, delta, np.random.default_rng(seed))
        train_t, inf_t = [], []
        for _ in range(reps):
            t = time.perf_counter()
            model.zero_grad()
            loss = triplet_loss_batch_hard(model.embed(T.Value(x_train), train=True), labels)
            loss.backward()
            train_t.append(time.perf_counter() - t)
            t = time.perf_counter()
            embed_arrays(model, x_inf)
            inf_t.append((time.perf_counter() - t) * 1000.0 / infer_samples)
        rows.append({"b": b, "train_s_per_epoch": statistics.median(train_t) * steps_per_epoch,
                     "infer_s_per_1k": statistics.median(inf_t), "flops_fwd": measured_flops(model)})
    return rows


def bench_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(BENCH_HEADER)
    for r in rows:
        w.writerow([r["b"], f"{r['train_s_per_epoch']:.6f}", f"{r['infer_s_per_1k']:.6f}", r["flops_fwd"]])
    return buf.getvalue()
