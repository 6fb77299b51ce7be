"""Manifests, keypoints, orientation subsets, P x K sampling and synthetic data."""

from __future__ import annotations

import csv
import json
import math
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import BatchError, DataError, UnassignableError

KEYPOINT_NAMES = ("neck", "right_shoulder", "left_shoulder", "right_hip", "left_hip", "right_ankle", "left_ankle")
SUBSETS = ("front", "side", "back")
SPLITS = ("train", "query", "gallery")
MANIFEST_HEADER = ("sample_id", "identity", "camera", "split", "path")
PAYLOAD_MAGIC = b"VBR1"
CONFIDENCE_THRESHOLD = 0.1


@dataclass(frozen=True)
class Record:
    sample_id: str
    identity: int
    camera: int
    split: str
    path: str


class Manifest:
    def __init__(self, records, root: Path | None = None):
        self.records = list(records)
        self.root = Path(root) if root is not None else None
        seen = set()
        for r in self.records:
            if r.sample_id in seen:
                raise DataError(f"duplicate sample_id {r.sample_id}")
            if r.split not in SPLITS:
                raise DataError(f"{r.sample_id}: unknown split {r.split!r}")
            seen.add(r.sample_id)
        counts: dict = {}
        for r in self.split("train"):
            counts[r.identity] = counts.get(r.identity, 0) + 1
        thin = sorted(i for i, c in counts.items() if c < 2)
        if thin:
            raise DataError(f"train identities with fewer than 2 samples: {thin[:10]}")

    def split(self, name: str) -> list:
        return [r for r in self.records if r.split == name]

    def by_id(self) -> dict:
        return {r.sample_id: r for r in self.records}

    def __len__(self):
        return len(self.records)

    @classmethod
    def load(cls, path) -> "Manifest":
        path = Path(path)
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if tuple(header or ()) != MANIFEST_HEADER:
                raise DataError(f"{path}: header must be {','.join(MANIFEST_HEADER)}")
            records = []
            for lineno, row in enumerate(reader, 2):
                if not row:
                    continue
                if len(row) != 5:
                    raise DataError(f"{path}:{lineno}: expected 5 fields, got {len(row)}")
                try:
                    records.append(Record(row[0], int(row[1]), int(row[2]), row[3], row[4]))
                except ValueError as exc:
                    raise DataError(f"{path}:{lineno}: {exc}") from exc
        return cls(records, root=path.parent)

    def save(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(MANIFEST_HEADER)
            for r in self.records:
                w.writerow([r.sample_id, r.identity, r.camera, r.split, r.path])


# ---------------------------------------------------------------- keypoints

@dataclass
class KeypointRecord:
    """Named image-space points ``{name: (x, y, confidence)}``, origin top-left."""

    sample_id: str
    points: dict
    image_size: tuple | None = None  # (H, W)

    def __post_init__(self):
        for name, p in self.points.items():
            if len(p) != 3 or not all(math.isfinite(float(v)) for v in p):
                raise DataError(f"{self.sample_id}: keypoint {name} must be finite [x, y, confidence]")

    def present(self, threshold: float = CONFIDENCE_THRESHOLD) -> dict:
        return {k: (float(p[0]), float(p[1])) for k, p in self.points.items() if float(p[2]) >= threshold}

    def to_json(self) -> str:
        obj = {"sample_id": self.sample_id,
               "keypoints": {k: [float(v) for v in self.points[k]] for k in self.points}}
        if self.image_size is not None:
            obj["image_size"] = [int(v) for v in self.image_size]
        return json.dumps(obj, sort_keys=False)

    @classmethod
    def from_json(cls, line: str) -> "KeypointRecord":
        obj = json.loads(line)
        size = obj.get("image_size")
        return cls(str(obj["sample_id"]), {k: tuple(v) for k, v in obj["keypoints"].items()},
                   tuple(size) if size else None)


def read_keypoints(path) -> "OrderedDict[str, KeypointRecord]":
    out: OrderedDict = OrderedDict()
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = KeypointRecord.from_json(line)
            except (ValueError, KeyError, TypeError) as exc:
                raise DataError(f"{path}:{lineno}: bad keypoint record: {exc}") from exc
            out[rec.sample_id] = rec
    return out


def write_keypoints(path, records):
    with open(path, "w") as fh:
        for rec in records:
            fh.write(rec.to_json() + "\n")


# -------------------------------------------------------------- orientation

def orientation_angle(kp: KeypointRecord, threshold: float = CONFIDENCE_THRESHOLD) -> float:
    """Body rotation angle in [0, pi] from shoulder width over torso height.

    The sign comes from the horizontal order of the shoulders; when both
    shoulders share an x coordinate the view is a pure profile and the
    angle is pi/2.
    """
    pts = kp.present(threshold)
    need = ("right_shoulder", "left_shoulder", "right_hip", "left_hip")
    missing = [n for n in need if n not in pts]
    if missing:
        raise UnassignableError(f"{kp.sample_id}: missing or low-confidence {missing}")
    rs, ls, rh, lh = (np.array(pts[n]) for n in need)
    height = 0.5 * (np.hypot(*(rs - rh)) + np.hypot(*(ls - lh)))
    if height <= 0:
        raise UnassignableError(f"{kp.sample_id}: zero torso height")
    dx = rs[0] - ls[0]
    if dx == 0:
        return math.pi / 2
    mu = math.copysign(1.0, dx)
    ratio = mu * float(np.hypot(*(rs - ls))) / height
    return math.acos(min(max(ratio, -1.0), 1.0))


def assign_subset(theta: float) -> str:
    """front for [0, pi/3], side for (pi/3, 2pi/3], back above."""
    if theta <= math.pi / 3:
        return "front"
    if theta <= 2 * math.pi / 3:
        return "side"
    return "back"


@dataclass
class OrientationSplit:
    subsets: dict  # subset name -> list of Record
    thetas: dict  # sample_id -> theta
    unassignable: list  # sample_ids


def orientation_subsets(records, keypoints: dict, threshold: float = CONFIDENCE_THRESHOLD) -> OrientationSplit:
    """Partition records into front/side/back; records without usable keypoints are listed, not dropped silently."""
    subsets = {s: [] for s in SUBSETS}
    thetas, bad = {}, []
    for r in records:
        kp = keypoints.get(r.sample_id)
        if kp is None:
            bad.append(r.sample_id)
            continue
        try:
            theta = orientation_angle(kp, threshold)
        except UnassignableError:
            bad.append(r.sample_id)
            continue
        thetas[r.sample_id] = theta
        subsets[assign_subset(theta)].append(r)
    return OrientationSplit(subsets, thetas, bad)


# ----------------------------------------------------------------- batching

@dataclass
class TripletBatch:
    sample_ids: list
    labels: np.ndarray
    P: int
    K: int
    data: np.ndarray | None = None  # [P*K, H, W, C]
    heatmaps: dict = field(default_factory=dict)  # region -> list of Heatmap
    orientation: str | None = None

    def __post_init__(self):
        if len(self.sample_ids) != self.P * self.K or len(self.labels) != self.P * self.K:
            raise BatchError(f"batch must have exactly {self.P * self.K} rows")
        groups = self.labels.reshape(self.P, self.K)
        if not (groups == groups[:, :1]).all():
            raise BatchError("each group of K rows must hold a single identity")


def group_by_identity(records) -> "OrderedDict[int, list]":
    groups: OrderedDict = OrderedDict()
    for r in sorted(records, key=lambda r: (r.identity, r.sample_id)):
        groups.setdefault(r.identity, []).append(r)
    return groups


def sample_pk_batch(records, P: int, K: int, rng: np.random.Generator, accept=None, stats: dict | None = None) -> TripletBatch:
    """Draw P identities without replacement, then K images per identity.

    Images are drawn without replacement unless the identity has fewer than
    K.  ``accept(record)`` may reject images (e.g. missing keypoints); a
    rejected draw is replaced from the same identity's acceptable images and
    counted in ``stats["resampled"]``.  Identities with no acceptable image
    are never chosen.
    """
    if P < 1 or K < 1:
        raise BatchError("P and K must be positive")
    groups = group_by_identity(records)
    if accept is not None:
        pool = {i: [r for r in rs if accept(r)] for i, rs in groups.items()}
        ids = [i for i in groups if pool[i]]
    else:
        pool = groups
        ids = list(groups)
    if len(ids) < P:
        raise BatchError(f"need {P} identities, only {len(ids)} available")
    chosen = rng.choice(len(ids), size=P, replace=False)
    rows = []
    for c in chosen:
        ident = ids[c]
        members = groups[ident]
        picks = rng.choice(len(members), size=K, replace=len(members) < K)
        for p in picks:
            r = members[p]
            if accept is not None and not accept(r):
                if stats is not None:
                    stats["resampled"] = stats.get("resampled", 0) + 1
                ok = pool[ident]
                r = ok[rng.integers(len(ok))]
            rows.append(r)
    return TripletBatch([r.sample_id for r in rows], np.array([r.identity for r in rows]), P, K)


# ----------------------------------------------------------------- payloads

def write_payload(path, array: np.ndarray):
    a = np.asarray(array, dtype="<f4")
    if a.ndim != 3:
        raise DataError(f"payload must be [H, W, C], got {a.shape}")
    with open(path, "wb") as fh:
        fh.write(PAYLOAD_MAGIC + struct.pack("<III", *a.shape))
        fh.write(a.tobytes(order="C"))


def read_payload(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != PAYLOAD_MAGIC:
        raise DataError(f"{path}: not a VBR1 payload")
    h, w, c = struct.unpack("<III", raw[4:16])
    body = raw[16:]
    if len(body) != 4 * h * w * c:
        raise DataError(f"{path}: expected {h * w * c} values, found {len(body) // 4}")
    return np.frombuffer(body, dtype="<f4").reshape(h, w, c).astype(np.float64)


class Dataset:
    """A manifest plus in-memory payloads and keypoints."""

    def __init__(self, manifest: Manifest, payloads: dict, keypoints: dict | None = None, meta: dict | None = None):
        self.manifest = manifest
        self.payloads = payloads
        self.keypoints = keypoints or {}
        self.meta = meta or {}

    def stack(self, sample_ids) -> np.ndarray:
        try:
            return np.stack([self.payloads[s] for s in sample_ids])
        except KeyError as exc:
            raise DataError(f"no payload for sample {exc.args[0]}") from exc

    def image_hw(self) -> tuple:
        first = next(iter(self.payloads.values()))
        return first.shape[:2]

    def save(self, out_dir):
        out = Path(out_dir)
        (out / "payloads").mkdir(parents=True, exist_ok=True)
        for r in self.manifest.records:
            write_payload(out / r.path, self.payloads[r.sample_id])
        self.manifest.save(out / "manifest.csv")
        write_keypoints(out / "keypoints.jsonl", [self.keypoints[r.sample_id] for r in self.manifest.records
                                                   if r.sample_id in self.keypoints])
        if self.meta:
            with open(out / "synth_modes.csv", "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["sample_id", "mode", "subset"])
                for sid, (mode, subset) in self.meta.items():
                    w.writerow([sid, mode, subset])

    @classmethod
    def load(cls, data_dir, manifest_path=None) -> "Dataset":
        data_dir = Path(data_dir)
        manifest = Manifest.load(manifest_path or data_dir / "manifest.csv")
        root = manifest.root
        payloads = {r.sample_id: read_payload(root / r.path) for r in manifest.records}
        kp_path = root / "keypoints.jsonl"
        keypoints = read_keypoints(kp_path) if kp_path.exists() else {}
        return cls(manifest, payloads, keypoints)


# ---------------------------------------------------------------- synthetic

def _mode_angles(modes: int) -> list:
    return [(j + 0.5) * math.pi / modes for j in range(modes)]


def _render(colors, theta, hw, shift, rng, noise):
    H, W = hw
    sy, sx = H / 32.0, W / 16.0
    img = np.empty((H, W, 3))
    img[:] = 0.5 if noise == 0 else rng.uniform(0.35, 0.65)
    cx = (W - 1) / 2.0 + shift[0]
    dy = shift[1]
    y_sh, y_hip, y_ank, y_neck = 8 * sy + dy, 18 * sy + dy, 29 * sy + dy, 6.5 * sy + dy
    torso_h = y_hip - y_sh
    c = math.cos(theta)
    # shoulder half-width solving 2|hw| / sqrt(th^2 + (hw/2)^2) = |c|
    hw_s = c * torso_h / math.sqrt(4.0 - c * c / 4.0)
    hw_h = 0.5 * hw_s
    ys, xs = np.mgrid[0:H, 0:W]
    yc, xc = ys.astype(float), xs.astype(float)

    half = max(abs(hw_s), 1.5 * sx)
    torso = (yc >= y_sh) & (yc <= y_hip) & (np.abs(xc - cx) <= half)
    if c > 0.3:
        img[torso] = colors["front"]
        logo = torso & (np.abs(xc - cx) <= 1.0 * sx) & (np.abs(yc - (y_sh + 0.35 * torso_h)) <= 1.5 * sy)
        img[logo] = colors["logo"]
    elif c < -0.3:
        img[torso] = colors["back"]
        stripe = torso & (np.abs(yc - (y_sh + 0.6 * torso_h)) <= 1.0 * sy)
        img[stripe] = colors["stripe"]
    else:
        img[torso & (xc < cx)] = colors["front"]
        img[torso & (xc >= cx)] = colors["back"]
    leg_half = 1.5 * sx
    leg_x = (cx + hw_h, cx - hw_h) if abs(hw_h) >= leg_half else (cx,)
    for lx in leg_x:
        leg = (yc > y_hip) & (yc <= y_ank) & (np.abs(xc - lx) <= leg_half)
        img[leg] = colors["pants"]
        shoe = (yc > y_ank - 1) & (yc <= y_ank + 1.5 * sy) & (np.abs(xc - lx) <= leg_half + 0.5)
        img[shoe] = colors["shoes"]
    head = (yc - 3.5 * sy - dy) ** 2 / sy**2 + (xc - cx) ** 2 / sx**2 <= 2.6**2
    img[head] = colors["skin"]
    img[head & (yc < 3.0 * sy + dy)] = colors["hair"]
    if noise > 0:
        img = img + rng.normal(0.0, noise, img.shape)
    points = {
        "neck": (cx, y_neck),
        "right_shoulder": (cx + hw_s, y_sh),
        "left_shoulder": (cx - hw_s, y_sh),
        "right_hip": (cx + hw_h, y_hip),
        "left_hip": (cx - hw_h, y_hip),
        "right_ankle": (cx + hw_h, y_ank),
        "left_ankle": (cx - hw_h, y_ank),
    }
    return img, points


def generate_synthetic(n_ids: int, per_id: int, modes: int, noise: float, image_hw=(32, 16),
                       rng: np.random.Generator | None = None, train_fraction: float = 0.5,
                       cameras: int = 2) -> Dataset:
    """Render a toy re-ID dataset of ``n_ids`` identities.

    Each identity gets random part colours.  Sample ``k`` of an identity is
    rendered in mode ``k % modes``; mode ``j`` is a body rotation of
    ``(j + 0.5) pi / modes`` that changes the visible torso width and which
    side of the shirt shows.  Keypoints follow the rendered body, so the
    orientation subset of a sample is recoverable from its keypoints.  With
    ``noise > 0`` each sample gets pixel noise of that std, a +-1 px shift,
    a random background and keypoint jitter of ``noise`` px; the round trip
    from keypoints to generating mode is exact for ``noise <= 0.3``.

    The first ``train_fraction`` of identities form the train split; for the
    rest, the first two samples (one per camera) are queries and the others
    gallery.
    """
    if modes < 1:
        raise DataError("modes must be >= 1")
    if per_id < 1:
        raise DataError("per_id must be >= 1")
    rng = np.random.default_rng(0) if rng is None else rng
    angles = _mode_angles(modes)
    n_train = int(round(n_ids * train_fraction))
    records, payloads, keypoints, meta = [], {}, {}, {}
    for ident in range(n_ids):
        colors = {k: rng.uniform(0.0, 1.0, 3) for k in ("front", "back", "logo", "stripe", "pants", "shoes", "hair")}
        colors["skin"] = rng.uniform(0.5, 0.9) * np.array([1.0, 0.8, 0.65])
        train = ident < n_train
        for k in range(per_id):
            mode = k % modes
            sid = f"id{ident:04d}_s{k:02d}"
            if noise > 0:
                shift = (float(rng.integers(-1, 2)), float(rng.integers(-1, 2)))
            else:
                shift = (0.0, 0.0)
            img, pts = _render(colors, angles[mode], image_hw, shift, rng, noise)
            if noise > 0:
                pts = {n: (x + rng.normal(0, noise), y + rng.normal(0, noise)) for n, (x, y) in pts.items()}
            if train:
                split = "train"
            else:
                split = "query" if k < min(cameras, per_id - 1) else "gallery"
            records.append(Record(sid, ident, k % cameras, split, f"payloads/{sid}.vbr"))
            payloads[sid] = img.astype(np.float32).astype(np.float64)
            keypoints[sid] = KeypointRecord(sid, {n: (x, y, 0.9) for n, (x, y) in pts.items()}, tuple(image_hw))
            meta[sid] = (mode, assign_subset(angles[mode]))
    return Dataset(Manifest(records), payloads, keypoints, meta)
