"""Searchable feature memory: exact KNN, IVF approximate KNN, FIFO mode, persistence.

Features are L2-normalized and quantized to float32 at insertion, so similarity
search reduces to a dot product against unit rows. The in-memory search matrix
holds those quantized values widened to float64, which keeps accumulation at
64-bit while the snapshot format stays at 32-bit per component.
"""

from __future__ import annotations

import json
import os
import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .errors import (
    ChecksumMismatch,
    DimMismatch,
    EmptyBank,
    FormatVersionMismatch,
    LabelOutOfRange,
    NotEnoughEntries,
    ZeroNorm,
)

SNAPSHOT_MAGIC = b"ANPC"
SNAPSHOT_VERSION = 1

_HEADER = struct.Struct("<4sIIIQQ")  # magic, version, dim, num_classes, count, capacity
_ENTRY_META = struct.Struct("<QIBIf")  # id, label, tag, domain_id, confidence


@dataclass(frozen=True)
class Source:
    """Entry came from a labeled source-domain dataset."""

    domain_id: int = 0


@dataclass(frozen=True)
class Target:
    """Entry is a confident test-time prediction; confidence recorded at insertion."""

    confidence: float


Provenance = Source | Target


@dataclass(frozen=True)
class MemoryEntry:
    id: int
    feature: np.ndarray  # unit-norm, float32-quantized values
    label: int
    provenance: Provenance

    def __eq__(self, other):
        if not isinstance(other, MemoryEntry):
            return NotImplemented
        return (
            self.id == other.id
            and self.label == other.label
            and self.provenance == other.provenance
            and np.array_equal(self.feature, other.feature)
        )


@dataclass(frozen=True)
class NeighborSet:
    """Top-k matches, sorted by descending similarity then ascending id."""

    neighbors: tuple[tuple[int, float], ...]

    def ids(self) -> list[int]:
        return [i for i, _ in self.neighbors]

    def __len__(self):
        return len(self.neighbors)

    def __iter__(self):
        return iter(self.neighbors)


@dataclass
class IvfIndex:
    n_clusters: int
    centroids: np.ndarray        # (n_clusters, dim) float64
    posting_lists: list[np.ndarray]  # entry ids per centroid, each sorted
    indexed_max_id: int          # entries with id > this form the un-indexed tail
    seed: int


def _normalize_quantized(feature, dim: int) -> np.ndarray:
    """L2-normalize at float64, then quantize to float32 values (kept as float64)."""
    f = np.asarray(feature, dtype=np.float64)
    if f.ndim != 1 or f.shape[0] != dim:
        raise DimMismatch(f"feature shape {f.shape} != ({dim},)")
    if not np.all(np.isfinite(f)):
        raise ValueError("feature contains NaN or Inf")
    norm = np.linalg.norm(f)
    if norm < 1e-30:
        raise ZeroNorm("cannot store a zero-norm feature")
    return (f / norm).astype(np.float32).astype(np.float64)


class MemoryBank:
    """Ordered collection of (feature, label, provenance) entries.

    Unbounded by default (inference mode). With ``capacity`` set the bank is a
    FIFO of the most recent ``capacity`` entries (training mode). Rows are kept
    in ascending-id order, so eviction always removes row 0.
    """

    def __init__(self, dim: int, num_classes: int, capacity: int | None = None):
        if dim < 1 or num_classes < 1:
            raise ValueError("dim and num_classes must be positive")
        if capacity is not None and capacity < 1:
            raise ValueError("capacity must be positive when set")
        self.dim = int(dim)
        self.num_classes = int(num_classes)
        self.capacity = capacity
        self._feat = np.empty((0, dim), dtype=np.float64)
        self._n = 0
        self._ids = np.empty(0, dtype=np.int64)
        self._labels = np.empty(0, dtype=np.int64)
        self._prov: list[Provenance] = []
        self._next_id = 0
        self.index: IvfIndex | None = None
        self.version = 0  # bumped on every mutation

    # -- basic container protocol ------------------------------------------

    def __len__(self) -> int:
        return self._n

    @property
    def features(self) -> np.ndarray:
        """Live (n, dim) view of the stored unit features; do not mutate."""
        return self._feat[: self._n]

    @property
    def labels(self) -> np.ndarray:
        return self._labels[: self._n]

    @property
    def ids(self) -> np.ndarray:
        return self._ids[: self._n]

    def entry(self, entry_id: int) -> MemoryEntry:
        row = self._row_of(entry_id)
        if row is None:
            raise KeyError(f"no entry with id {entry_id}")
        return MemoryEntry(
            id=int(self._ids[row]),
            feature=self._feat[row].copy(),
            label=int(self._labels[row]),
            provenance=self._prov[row],
        )

    def entries(self) -> list[MemoryEntry]:
        return [self.entry(int(i)) for i in self.ids]

    def label_of(self, entry_id: int) -> int:
        row = self._row_of(entry_id)
        if row is None:
            raise KeyError(f"no entry with id {entry_id}")
        return int(self._labels[row])

    def source_count(self) -> int:
        return sum(1 for p in self._prov[: self._n] if isinstance(p, Source))

    def target_count(self) -> int:
        return self._n - self.source_count()

    def _row_of(self, entry_id: int) -> int | None:
        ids = self.ids
        row = int(np.searchsorted(ids, entry_id))
        if row < len(ids) and ids[row] == entry_id:
            return row
        return None

    # -- insertion ----------------------------------------------------------

    def _grow(self, extra: int):
        need = self._n + extra
        if need <= self._feat.shape[0]:
            return
        cap = max(16, self._feat.shape[0])
        while cap < need:
            cap *= 2
        feat = np.empty((cap, self.dim), dtype=np.float64)
        feat[: self._n] = self._feat[: self._n]
        self._feat = feat
        ids = np.empty(cap, dtype=np.int64)
        ids[: self._n] = self._ids[: self._n]
        self._ids = ids
        labels = np.empty(cap, dtype=np.int64)
        labels[: self._n] = self._labels[: self._n]
        self._labels = labels

    def _evict_oldest(self, count: int):
        self._feat[: self._n - count] = self._feat[count : self._n]
        self._ids[: self._n - count] = self._ids[count : self._n]
        self._labels[: self._n - count] = self._labels[count : self._n]
        del self._prov[:count]
        self._n -= count

    def insert(self, feature, label: int, provenance: Provenance) -> int:
        """Append one entry; in FIFO mode evict the lowest id when over capacity."""
        if not (0 <= label < self.num_classes):
            raise LabelOutOfRange(f"label {label} not in [0, {self.num_classes})")
        if isinstance(provenance, Target):
            # quantize confidence so snapshots round-trip bit-exactly
            provenance = Target(confidence=float(np.float32(provenance.confidence)))
        row_values = _normalize_quantized(feature, self.dim)
        self._grow(1)
        self._feat[self._n] = row_values
        self._ids[self._n] = self._next_id
        self._labels[self._n] = label
        self._prov.append(provenance)
        self._n += 1
        entry_id = self._next_id
        self._next_id += 1
        if self.capacity is not None and self._n > self.capacity:
            self._evict_oldest(self._n - self.capacity)
        self.version += 1
        return entry_id

    def insert_batch(self, features, labels, provenances) -> list[int]:
        """Vectorized sequence of inserts with identical semantics."""
        feats = np.asarray(features, dtype=np.float64)
        if feats.ndim != 2 or feats.shape[1] != self.dim:
            raise DimMismatch(f"batch shape {feats.shape} != (n, {self.dim})")
        if not np.all(np.isfinite(feats)):
            raise ValueError("batch contains NaN or Inf")
        labels = np.asarray(labels, dtype=np.int64)
        if np.any(labels < 0) or np.any(labels >= self.num_classes):
            raise LabelOutOfRange("batch label outside [0, num_classes)")
        norms = np.linalg.norm(feats, axis=1, keepdims=True)
        if np.any(norms < 1e-30):
            raise ZeroNorm("batch contains a zero-norm feature")
        rows = (feats / norms).astype(np.float32).astype(np.float64)
        n_new = rows.shape[0]
        self._grow(n_new)
        self._feat[self._n : self._n + n_new] = rows
        new_ids = np.arange(self._next_id, self._next_id + n_new, dtype=np.int64)
        self._ids[self._n : self._n + n_new] = new_ids
        self._labels[self._n : self._n + n_new] = labels
        for p in provenances:
            if isinstance(p, Target):
                p = Target(confidence=float(np.float32(p.confidence)))
            self._prov.append(p)
        if len(self._prov) != self._n + n_new:
            del self._prov[self._n :]
            raise ValueError("provenances length != batch length")
        self._n += n_new
        self._next_id += n_new
        if self.capacity is not None and self._n > self.capacity:
            self._evict_oldest(self._n - self.capacity)
        self.version += 1
        return [int(i) for i in new_ids]

    def replace_feature(self, entry_id: int, feature) -> None:
        """Overwrite one entry's stored feature, keeping id/label/provenance.

        Used by the training refresh that re-encodes remembered samples with
        the current encoder. Normalization and quantization as in insert.
        """
        row = self._row_of(entry_id)
        if row is None:
            raise KeyError(f"no entry with id {entry_id}")
        self._feat[row] = _normalize_quantized(feature, self.dim)
        self.version += 1

    # -- search -------------------------------------------------------------

    def _prepare_query(self, query) -> np.ndarray:
        q = np.asarray(query, dtype=np.float64)
        if q.ndim != 1 or q.shape[0] != self.dim:
            raise DimMismatch(f"query shape {q.shape} != ({self.dim},)")
        if not np.all(np.isfinite(q)):
            raise ValueError("query contains NaN or Inf")
        norm = np.linalg.norm(q)
        if norm < 1e-30:
            raise ZeroNorm("zero-norm query")
        return q / norm

    @staticmethod
    def _select_top(sims: np.ndarray, ids: np.ndarray, k: int) -> list[tuple[int, float]]:
        """Exact top-k by (descending sim, ascending id); sims may hold -inf marks."""
        usable = sims > -np.inf
        n_usable = int(np.count_nonzero(usable))
        if n_usable == 0:
            raise EmptyBank("no entries left to search after exclusions")
        if n_usable <= k:
            cand = np.flatnonzero(usable)
        else:
            part = np.argpartition(-sims, k - 1)[:k]
            boundary = float(np.min(sims[part]))
            cand = np.flatnonzero(sims >= boundary)
        order = np.lexsort((ids[cand], -sims[cand]))
        cand = cand[order][:k]
        return [(int(ids[i]), float(np.clip(sims[i], -1.0, 1.0))) for i in cand]

    def knn_exact(self, query, k: int, exclude: set[int] | None = None) -> NeighborSet:
        """Full-scan top-k by cosine similarity (dot product on unit rows)."""
        if k < 1:
            raise ValueError("k must be >= 1")
        if self._n == 0:
            raise EmptyBank("bank is empty")
        q = self._prepare_query(query)
        sims = self.features @ q
        ids = self.ids
        if exclude:
            mask = np.isin(ids, np.fromiter(exclude, dtype=np.int64, count=len(exclude)))
            sims = np.where(mask, -np.inf, sims)
        return NeighborSet(tuple(self._select_top(sims, ids, k)))

    # -- IVF ----------------------------------------------------------------

    def build_ivf(self, n_clusters: int, seed: int = 0, fit_sample: int = 20000) -> IvfIndex:
        """Cluster current entries with seeded k-means and attach posting lists.

        Above fit_sample entries the centroids are fitted on a seeded subsample
        and the full bank is assigned in one pass; quantization quality barely
        moves but build time stops scaling with bank size.
        """
        if n_clusters < 1:
            raise ValueError("n_clusters must be >= 1")
        if self._n < n_clusters:
            raise NotEnoughEntries(f"bank has {self._n} entries < {n_clusters} clusters")
        feats = self.features
        if self._n > fit_sample >= n_clusters:
            rng = np.random.default_rng(seed)
            subset = rng.choice(self._n, size=fit_sample, replace=False)
            centroids, _ = _kmeans(feats[np.sort(subset)], n_clusters, seed)
            pts = feats.astype(np.float32)
            cf = centroids.astype(np.float32)
            assign = np.argmin(
                np.sum(cf**2, axis=1)[None, :] - 2.0 * (pts @ cf.T), axis=1
            )
        else:
            centroids, assign = _kmeans(feats, n_clusters, seed)
        ids = self.ids
        posting = [np.sort(ids[assign == c]) for c in range(n_clusters)]
        self.index = IvfIndex(
            n_clusters=n_clusters,
            centroids=centroids,
            posting_lists=posting,
            indexed_max_id=int(ids[-1]),
            seed=seed,
        )
        return self.index

    def index_tail_size(self) -> int:
        """Entries inserted after the last index build (scanned exactly)."""
        if self.index is None:
            return self._n
        return int(np.count_nonzero(self.ids > self.index.indexed_max_id))

    def knn_ivf(self, query, k: int, nprobe: int, exclude: set[int] | None = None) -> NeighborSet:
        """Approximate top-k scanning ``nprobe`` nearest posting lists plus the tail."""
        if self.index is None:
            raise NotEnoughEntries("no IVF index built; call build_ivf first")
        if not (1 <= nprobe <= self.index.n_clusters):
            raise ValueError(f"nprobe must be in [1, {self.index.n_clusters}]")
        if self._n == 0:
            raise EmptyBank("bank is empty")
        q = self._prepare_query(query)
        cscores = self.index.centroids @ q
        probe = np.argsort(-cscores, kind="stable")[:nprobe]
        parts = [self.index.posting_lists[int(c)] for c in probe]
        ids = self.ids
        tail = ids[ids > self.index.indexed_max_id]
        parts.append(tail)
        cand_ids = np.unique(np.concatenate(parts))
        # drop candidate ids that were evicted since the build
        pos = np.searchsorted(ids, cand_ids)
        valid = pos < len(ids)
        pos, cand_ids = pos[valid], cand_ids[valid]
        rows = pos[ids[pos] == cand_ids]
        if rows.size == 0:
            raise EmptyBank("no candidate entries in probed clusters")
        sims = np.take(self.features, rows, axis=0) @ q
        cids = ids[rows]
        if exclude:
            mask = np.isin(cids, np.fromiter(exclude, dtype=np.int64, count=len(exclude)))
            sims = np.where(mask, -np.inf, sims)
        return NeighborSet(tuple(self._select_top(sims, cids, k)))

    # -- persistence ----------------------------------------------------------

    def save(self, path: str | os.PathLike, metadata: dict | None = None) -> None:
        """Write the versioned binary snapshot plus a JSON manifest."""
        path = os.fspath(path)
        blob = bytearray()
        blob += _HEADER.pack(
            SNAPSHOT_MAGIC,
            SNAPSHOT_VERSION,
            self.dim,
            self.num_classes,
            self._n,
            0 if self.capacity is None else self.capacity,
        )
        for row in range(self._n):
            prov = self._prov[row]
            if isinstance(prov, Source):
                tag, domain_id, conf = 0, prov.domain_id, 0.0
            else:
                tag, domain_id, conf = 1, 0, prov.confidence
            blob += _ENTRY_META.pack(
                int(self._ids[row]), int(self._labels[row]), tag, domain_id, conf
            )
            blob += self._feat[row].astype(np.float32).tobytes()
        blob += struct.pack("<I", zlib.crc32(bytes(blob)))
        tmp = path + ".tmp"
        with open(tmp, "wb") as fh:
            fh.write(bytes(blob))
        os.replace(tmp, path)
        manifest = {
            "format_version": SNAPSHOT_VERSION,
            "dim": self.dim,
            "num_classes": self.num_classes,
            "entries": self._n,
            "capacity": self.capacity,
            "source_count": self.source_count(),
            "target_count": self.target_count(),
        }
        if metadata:
            manifest["metadata"] = metadata
        with open(_manifest_path(path), "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path: str | os.PathLike) -> "MemoryBank":
        """Read a snapshot; any corruption rejects the whole file."""
        path = os.fspath(path)
        with open(path, "rb") as fh:
            blob = fh.read()
        if len(blob) < _HEADER.size + 4:
            raise ChecksumMismatch("file too short to be a snapshot")
        magic, version, dim, num_classes, count, capacity = _HEADER.unpack_from(blob, 0)
        if magic != SNAPSHOT_MAGIC or version != SNAPSHOT_VERSION:
            raise FormatVersionMismatch(
                f"bad magic/version {magic!r}/{version}; expected {SNAPSHOT_MAGIC!r}/{SNAPSHOT_VERSION}"
            )
        entry_size = _ENTRY_META.size + 4 * dim
        expected = _HEADER.size + count * entry_size + 4
        if len(blob) != expected:
            raise ChecksumMismatch(f"size {len(blob)} != expected {expected}")
        (crc_stored,) = struct.unpack_from("<I", blob, len(blob) - 4)
        if zlib.crc32(blob[:-4]) != crc_stored:
            raise ChecksumMismatch("CRC32 trailer does not match contents")
        bank = cls(dim=dim, num_classes=num_classes, capacity=capacity or None)
        off = _HEADER.size
        for _ in range(count):
            entry_id, label, tag, domain_id, conf = _ENTRY_META.unpack_from(blob, off)
            off += _ENTRY_META.size
            feat = np.frombuffer(blob, dtype="<f4", count=dim, offset=off).astype(np.float64)
            off += 4 * dim
            prov: Provenance = Source(domain_id) if tag == 0 else Target(conf)
            bank._load_entry(entry_id, feat, label, prov)
        bank.version = 0
        return bank

    def _load_entry(self, entry_id: int, feature: np.ndarray, label: int, prov: Provenance):
        """Insert a pre-normalized, pre-quantized row verbatim (snapshot path)."""
        self._grow(1)
        self._feat[self._n] = feature
        self._ids[self._n] = entry_id
        self._labels[self._n] = label
        self._prov.append(prov)
        self._n += 1
        self._next_id = max(self._next_id, entry_id + 1)


def snapshot_save(bank: MemoryBank, path: str | os.PathLike, metadata: dict | None = None) -> None:
    bank.save(path, metadata=metadata)


def snapshot_load(path: str | os.PathLike) -> MemoryBank:
    return MemoryBank.load(path)


def _manifest_path(path: str) -> str:
    base, _ = os.path.splitext(path)
    return base + ".json"


def _kmeans(points: np.ndarray, n_clusters: int, seed: int, iters: int = 25):
    """Seeded k-means++ with Lloyd refinement and empty-cluster re-seeding.

    Runs at float32 internally for speed; returns float64 centroids and the
    final assignment. Deterministic for a fixed (points, n_clusters, seed).
    """
    rng = np.random.default_rng(seed)
    pts = points.astype(np.float32)
    n = pts.shape[0]

    # k-means++ seeding
    centroids = np.empty((n_clusters, pts.shape[1]), dtype=np.float32)
    first = int(rng.integers(n))
    centroids[0] = pts[first]
    d2 = np.sum((pts - centroids[0]) ** 2, axis=1)
    for c in range(1, n_clusters):
        total = float(d2.sum())
        if total <= 0.0:
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=d2 / total))
        centroids[c] = pts[idx]
        d2 = np.minimum(d2, np.sum((pts - centroids[c]) ** 2, axis=1))

    assign = np.zeros(n, dtype=np.int64)
    for _ in range(iters):
        # squared distance via the dot-product expansion; argmin per point
        cross = pts @ centroids.T
        cnorm = np.sum(centroids**2, axis=1)
        assign = np.argmin(cnorm[None, :] - 2.0 * cross, axis=1)
        counts = np.bincount(assign, minlength=n_clusters)
        for c in np.flatnonzero(counts == 0):
            donor = int(np.argmax(counts))
            members = np.flatnonzero(assign == donor)
            far = members[
                int(np.argmax(np.sum((pts[members] - centroids[donor]) ** 2, axis=1)))
            ]
            centroids[c] = pts[far]
            assign[far] = c
            counts = np.bincount(assign, minlength=n_clusters)
        sums = np.zeros_like(centroids)
        np.add.at(sums, assign, pts)
        centroids = sums / counts[:, None]
    return centroids.astype(np.float64), assign
