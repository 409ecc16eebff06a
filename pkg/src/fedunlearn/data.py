"""Loading, partitioning and splitting client data.

Every sample carries a global integer id (``LabeledSet.ids``) so that the
forget/retain/reserved bookkeeping can be checked by set arithmetic on ids.
"""

from __future__ import annotations

import csv
import gzip
import hashlib
import json
import math
import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import ContractError, DataFormatError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass(frozen=True)
class Standardization:
    """Per-channel mean/std (channel = axis 1 of the feature array)."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, features: np.ndarray) -> "Standardization":
        if len(features) == 0:
            raise ContractError("cannot fit standardization on an empty set")
        axes = (0,) + tuple(range(2, features.ndim))
        mean = features.mean(axis=axes)
        std = features.std(axis=axes)
        std = np.where(std > 1e-12, std, 1.0)
        return cls(mean, std)

    def apply(self, features: np.ndarray) -> np.ndarray:
        shape = (1, -1) + (1,) * (features.ndim - 2)
        return (features - self.mean.reshape(shape)) / self.std.reshape(shape)

    def to_json(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}


@dataclass(frozen=True)
class DatasetMeta:
    num_classes: int
    input_shape: Tuple[int, ...]
    name: str = ""
    standardization: Optional[Standardization] = None


@dataclass(frozen=True)
class LabeledSet:
    features: np.ndarray
    labels: np.ndarray
    meta: DatasetMeta
    ids: np.ndarray = None
    groups: Optional[np.ndarray] = None

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "labels", labels)
        if self.ids is None:
            object.__setattr__(self, "ids", np.arange(len(labels), dtype=np.int64))
        else:
            object.__setattr__(self, "ids", np.asarray(self.ids, dtype=np.int64).reshape(-1))
        if len(feats) != len(labels) or len(self.ids) != len(labels):
            raise ContractError(
                f"features ({len(feats)}), labels ({len(labels)}) and ids ({len(self.ids)}) disagree in length"
            )
        if len(feats) and tuple(feats.shape[1:]) != tuple(self.meta.input_shape):
            raise ContractError(f"features shape {feats.shape[1:]} != meta input_shape {self.meta.input_shape}")
        if len(labels) and (labels.min() < 0 or labels.max() >= self.meta.num_classes):
            raise ContractError(f"labels outside [0, {self.meta.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, positions: np.ndarray) -> "LabeledSet":
        positions = np.asarray(positions, dtype=np.int64)
        return LabeledSet(
            self.features[positions],
            self.labels[positions],
            self.meta,
            self.ids[positions],
            None if self.groups is None else self.groups[positions],
        )

    def select_ids(self, ids: Sequence[int]) -> "LabeledSet":
        """Subset by global id, in the order given."""
        lookup = {int(i): p for p, i in enumerate(self.ids)}
        try:
            positions = np.array([lookup[int(i)] for i in ids], dtype=np.int64)
        except KeyError as exc:
            raise ContractError(f"id {exc.args[0]} not present in {self.meta.name or 'set'}") from None
        return self.subset(positions)

    def label_histogram(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.meta.num_classes)

    def standardized(self, stats: Standardization) -> "LabeledSet":
        if self.meta.standardization is not None:
            raise ContractError(f"{self.meta.name or 'set'} is already standardized")
        meta = replace(self.meta, standardization=stats)
        feats = stats.apply(self.features) if len(self) else self.features
        return LabeledSet(feats, self.labels, meta, self.ids, self.groups)


def empty_like(ls: LabeledSet) -> LabeledSet:
    return ls.subset(np.zeros(0, dtype=np.int64))


def concat_sets(sets: Sequence[LabeledSet], tag_groups: bool = False) -> LabeledSet:
    """Concatenate sets sharing one meta; ids must stay unique."""
    if not sets:
        raise ContractError("nothing to concatenate")
    meta = sets[0].meta
    for s in sets[1:]:
        if s.meta.input_shape != meta.input_shape or s.meta.num_classes != meta.num_classes:
            raise ContractError("cannot concatenate sets with different shapes/classes")
    ids = np.concatenate([s.ids for s in sets])
    if len(np.unique(ids)) != len(ids):
        raise ContractError("duplicate sample ids across concatenated sets")
    if tag_groups:
        groups = np.concatenate([np.full(len(s), g, dtype=np.int64) for g, s in enumerate(sets)])
    elif all(s.groups is not None for s in sets):
        groups = np.concatenate([s.groups for s in sets])
    else:
        groups = None
    feats = np.concatenate([s.features.reshape((len(s),) + tuple(meta.input_shape)) for s in sets])
    return LabeledSet(feats, np.concatenate([s.labels for s in sets]), meta, ids, groups)


@dataclass
class ClientDataset:
    """One client's data: train = forget + retain, plus test/third-party/reserved."""

    client_id: int
    train: LabeledSet
    test: LabeledSet
    forget: Optional[LabeledSet] = None
    retain: Optional[LabeledSet] = None
    third_party: Optional[LabeledSet] = None
    reserved: Optional[LabeledSet] = None

    def __post_init__(self):
        if self.forget is None:
            self.forget = empty_like(self.train)
        if self.retain is None:
            self.retain = self.train
        self.validate()

    def validate(self) -> None:
        train = set(self.train.ids.tolist())
        f, r = set(self.forget.ids.tolist()), set(self.retain.ids.tolist())
        if f & r:
            raise ContractError(f"client {self.client_id}: forget and retain sets overlap")
        if f | r != train or len(f) + len(r) != len(self.train):
            raise ContractError(f"client {self.client_id}: forget + retain != train")
        if self.reserved is not None and set(self.reserved.ids.tolist()) & train:
            raise ContractError(f"client {self.client_id}: reserved data overlaps training data")


@dataclass(frozen=True)
class PartitionSpec:
    scheme: str = "iid"  # iid | label_shards | per_file
    num_clients: int = 10
    shards_per_client: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.scheme not in ("iid", "label_shards", "per_file"):
            raise ContractError(f"unknown partition scheme {self.scheme!r}")
        if self.num_clients < 2:
            raise ContractError(f"need at least 2 clients, got {self.num_clients}")
        if self.scheme == "label_shards" and self.shards_per_client < 1:
            raise ContractError("shards_per_client must be >= 1")


# -- loaders --------------------------------------------------------------------


def load_har_csv(
    paths: Sequence[Union[str, Path]],
    window_len: int = 50,
    stride: int = 25,
    num_classes: Optional[int] = None,
    standardization: Optional[Standardization] = None,
) -> List[LabeledSet]:
    """Sliding-window one HAR CSV per subject.

    Each file has a header row followed by ``timestamp,<channels...>,label``.
    A window of ``window_len`` consecutive rows becomes one C x 1 x window_len
    sample labelled with the window's majority label (ties go to the smaller
    label).  Sample ids are unique across all returned sets.
    """
    if window_len < 8:
        raise ContractError(f"window_len must be >= 8, got {window_len}")
    if stride < 1:
        raise ContractError(f"stride must be >= 1, got {stride}")
    raw = []
    channels = None
    for path in paths:
        rows, labels = [], []
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is not None:
                c = len(header) - 2
                if c < 1:
                    raise DataFormatError(f"{path}:1: need timestamp, >=1 channel and label columns")
                if channels is None:
                    channels = c
                elif c != channels:
                    raise DataFormatError(f"{path}:1: {c} channels, previous files had {channels}")
            for lineno, row in enumerate(reader, start=2):
                if not row:
                    continue
                if len(row) != channels + 2:
                    raise DataFormatError(f"{path}:{lineno}: expected {channels + 2} columns, got {len(row)}")
                try:
                    values = [float(v) for v in row[1:-1]]
                    label = int(row[-1])
                except ValueError as exc:
                    raise DataFormatError(f"{path}:{lineno}: {exc}") from None
                if label < 0 or (num_classes is not None and label >= num_classes):
                    raise DataFormatError(f"{path}:{lineno}: unknown label {label}")
                if not all(math.isfinite(v) for v in values):
                    raise DataFormatError(f"{path}:{lineno}: non-finite sensor value")
                rows.append(values)
                labels.append(label)
        raw.append((np.asarray(rows, dtype=np.float64), np.asarray(labels, dtype=np.int64)))

    channels = channels or 1
    k = num_classes
    if k is None:
        k = max([int(lab.max()) + 1 for _, lab in raw if len(lab)] + [2])
    meta = DatasetMeta(k, (channels, 1, window_len), "har", standardization)
    out, next_id = [], 0
    for values, labels in raw:
        n_win = 0 if len(labels) < window_len else (len(labels) - window_len) // stride + 1
        feats = np.zeros((n_win, channels, 1, window_len))
        ylab = np.zeros(n_win, dtype=np.int64)
        for w in range(n_win):
            s = w * stride
            feats[w, :, 0, :] = values[s : s + window_len].T
            ylab[w] = np.bincount(labels[s : s + window_len], minlength=k).argmax()
        if standardization is not None and n_win:
            feats = standardization.apply(feats)
        ids = np.arange(next_id, next_id + n_win, dtype=np.int64)
        next_id += n_win
        out.append(LabeledSet(feats, ylab, meta, ids))
    return out


def _open_maybe_gz(path: Union[str, Path]) -> bytes:
    path = Path(path)
    data = path.read_bytes()
    if data[:2] == b"\x1f\x8b":
        data = gzip.decompress(data)
    return data


def load_idx_images(image_path: Union[str, Path], label_path: Union[str, Path],
                    num_classes: int = 10) -> LabeledSet:
    """Read an IDX3 image file and its IDX1 label file (optionally gzipped)."""
    img, lab = _open_maybe_gz(image_path), _open_maybe_gz(label_path)
    if len(img) < 16:
        raise DataFormatError(f"{image_path}: truncated IDX header")
    magic, n, rows, cols = struct.unpack(">IIII", img[:16])
    if magic != IDX_IMAGES_MAGIC:
        raise DataFormatError(f"{image_path}: bad IDX image magic 0x{magic:08x}")
    if len(lab) < 8:
        raise DataFormatError(f"{label_path}: truncated IDX header")
    lmagic, ln = struct.unpack(">II", lab[:8])
    if lmagic != IDX_LABELS_MAGIC:
        raise DataFormatError(f"{label_path}: bad IDX label magic 0x{lmagic:08x}")
    if ln != n:
        raise DataFormatError(f"image count {n} != label count {ln}")
    if len(img) != 16 + n * rows * cols:
        raise DataFormatError(f"{image_path}: payload is {len(img) - 16} bytes, expected {n * rows * cols}")
    if len(lab) != 8 + n:
        raise DataFormatError(f"{label_path}: payload is {len(lab) - 8} bytes, expected {n}")
    pixels = np.frombuffer(img, dtype=np.uint8, offset=16).reshape(n, 1, rows, cols)
    labels = np.frombuffer(lab, dtype=np.uint8, offset=8).astype(np.int64)
    if n and labels.max() >= num_classes:
        raise DataFormatError(f"{label_path}: label {labels.max()} >= {num_classes}")
    meta = DatasetMeta(num_classes, (1, rows, cols), Path(image_path).name)
    return LabeledSet(pixels.astype(np.float64) / 255.0, labels, meta)


def write_idx(image_path: Union[str, Path], label_path: Union[str, Path],
              images: np.ndarray, labels: np.ndarray) -> None:
    """Write uint8 images (N x rows x cols) and labels as IDX3/IDX1."""
    images = np.asarray(images, dtype=np.uint8)
    n, rows, cols = images.shape
    Path(image_path).write_bytes(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols) + images.tobytes())
    Path(label_path).write_bytes(
        struct.pack(">II", IDX_LABELS_MAGIC, n) + np.asarray(labels, dtype=np.uint8).tobytes()
    )


# -- synthetic data ---------------------------------------------------------------


def dirichlet_concentration(non_iid_skew: float) -> float:
    return (1.0 - non_iid_skew) * 10.0 + 0.1


def synth_blobs(
    n_clients: int,
    classes: int,
    dim: int,
    samples_per_client: int,
    non_iid_skew: float = 0.0,
    seed: int = 0,
    center_scale: float = 4.0,
    spread: float = 1.0,
) -> List[LabeledSet]:
    """Gaussian class blobs split across clients.

    Each client's label proportions come from Dirichlet(alpha) with
    alpha = (1 - skew) * 10 + 0.1.  At skew == 0 the proportions are exactly
    uniform (the iid limit) rather than a Dirichlet draw.
    """
    if classes < 2:
        raise ContractError(f"need at least 2 classes, got {classes}")
    if not 0.0 <= non_iid_skew <= 1.0:
        raise ContractError(f"non_iid_skew must lie in [0, 1], got {non_iid_skew}")
    rng = np.random.default_rng(seed)
    centers = rng.normal(0.0, center_scale, size=(classes, dim))
    meta = DatasetMeta(classes, (dim,), "blobs")
    alpha = dirichlet_concentration(non_iid_skew)
    out = []
    for c in range(n_clients):
        if non_iid_skew == 0.0:
            props = np.full(classes, 1.0 / classes)
        else:
            props = rng.dirichlet(np.full(classes, alpha))
        y = rng.choice(classes, size=samples_per_client, p=props)
        x = centers[y] + spread * rng.standard_normal((samples_per_client, dim))
        ids = np.arange(c * samples_per_client, (c + 1) * samples_per_client, dtype=np.int64)
        out.append(LabeledSet(x, y, meta, ids))
    return out


# -- partitioning -----------------------------------------------------------------


def partition(base: LabeledSet, spec: PartitionSpec) -> List[LabeledSet]:
    """Split ``base`` into ``spec.num_clients`` disjoint client sets."""
    n = len(base)
    if spec.num_clients > n:
        raise ContractError(f"{spec.num_clients} clients but only {n} samples")
    rng = np.random.default_rng(spec.seed)
    if spec.scheme == "iid":
        chunks = np.array_split(rng.permutation(n), spec.num_clients)
    elif spec.scheme == "label_shards":
        num_shards = spec.num_clients * spec.shards_per_client
        if num_shards > n:
            raise ContractError(f"{num_shards} shards requested for {n} samples")
        order = rng.permutation(n)
        order = order[np.argsort(base.labels[order], kind="stable")]
        shards = np.array_split(order, num_shards)
        dealt = rng.permutation(num_shards).reshape(spec.num_clients, spec.shards_per_client)
        chunks = [np.concatenate([shards[s] for s in row]) for row in dealt]
    else:
        if base.groups is None:
            raise ContractError("per_file partitioning needs group (source file) tags")
        uniq = np.unique(base.groups)
        if len(uniq) != spec.num_clients:
            raise ContractError(f"{len(uniq)} source files but {spec.num_clients} clients")
        chunks = [np.flatnonzero(base.groups == g) for g in uniq]
    return [base.subset(np.sort(c)) for c in chunks]


def split_holdout(ls: LabeledSet, fraction: float, seed: int) -> Tuple[LabeledSet, LabeledSet]:
    """Random (kept, held_out) split with ceil(fraction * N) held out; fraction 0 holds nothing."""
    if not 0.0 <= fraction < 1.0:
        raise ContractError(f"holdout fraction must lie in [0, 1), got {fraction}")
    k = int(math.ceil(fraction * len(ls))) if fraction > 0 else 0
    perm = np.random.default_rng(seed).permutation(len(ls))
    return ls.subset(np.sort(perm[k:])), ls.subset(np.sort(perm[:k]))


def _stratified_counts(counts: np.ndarray, fraction: float, total: int) -> np.ndarray:
    quota = counts * fraction
    take = np.floor(quota).astype(np.int64)
    rem = total - take.sum()
    if rem > 0:
        frac = quota - take
        frac[take >= counts] = -1.0
        for c in np.argsort(-frac, kind="stable")[:rem]:
            take[c] += 1
    return np.minimum(take, counts)


def split_forget(client: ClientDataset, fraction: float, mode: str = "random", seed: int = 0) -> ClientDataset:
    """Carve ceil(fraction * N) training samples into the forget set."""
    if not 0.0 < fraction < 1.0:
        raise ContractError(f"forget fraction must lie in (0, 1), got {fraction}")
    train = client.train
    n = len(train)
    if n == 0:
        raise ContractError(f"client {client.client_id} has no training data")
    k = int(math.ceil(fraction * n))
    rng = np.random.default_rng(seed)
    if mode == "random":
        chosen = rng.choice(n, size=k, replace=False)
    elif mode == "per_class":
        counts = train.label_histogram()
        take = _stratified_counts(counts, fraction, k)
        chosen = np.concatenate([
            rng.choice(np.flatnonzero(train.labels == c), size=t, replace=False)
            for c, t in enumerate(take) if t > 0
        ])
    else:
        raise ContractError(f"unknown forget split mode {mode!r}")
    mask = np.zeros(n, dtype=bool)
    mask[chosen] = True
    return replace(
        client,
        forget=train.subset(np.flatnonzero(mask)),
        retain=train.subset(np.flatnonzero(~mask)),
    )


def make_third_party(client: ClientDataset, kind: str, size: int, seed: int = 0) -> LabeledSet:
    """Data the model never trained on: Gaussian noise or the client's reserved pool."""
    rng = np.random.default_rng(seed)
    ref = client.forget if len(client.forget) else client.train
    meta = ref.meta
    if kind == "noise":
        if size < 1:
            raise ContractError("noise third-party set needs size >= 1")
        feats = rng.standard_normal((size,) + tuple(meta.input_shape))
        labels = rng.integers(0, meta.num_classes, size=size)
        # negative ids keep noise disjoint from every real sample id
        ids = -np.arange(1, size + 1, dtype=np.int64)
        return LabeledSet(feats, labels, replace(meta, name="noise"), ids)
    if kind == "reserved":
        pool = client.reserved
        if pool is None or len(pool) < size:
            have = 0 if pool is None else len(pool)
            raise ContractError(f"reserved pool has {have} samples, {size} requested")
        return pool.subset(rng.permutation(len(pool))[:size])
    raise ContractError(f"unknown third-party kind {kind!r}")


# -- manifests ---------------------------------------------------------------------


def build_manifest(clients: Sequence[ClientDataset], extra: Optional[dict] = None) -> dict:
    """Per-client id lists for every split, so later runs can reuse identical splits."""
    def ids(ls):
        return None if ls is None else [int(i) for i in ls.ids]

    manifest = {
        "version": 1,
        "clients": [
            {
                "client_id": c.client_id,
                "train": ids(c.train),
                "forget": ids(c.forget),
                "retain": ids(c.retain),
                "reserved": ids(c.reserved),
                "test": ids(c.test),
            }
            for c in clients
        ],
    }
    if extra:
        manifest.update(extra)
    return manifest


def manifest_hash(manifest: dict) -> str:
    blob = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()
