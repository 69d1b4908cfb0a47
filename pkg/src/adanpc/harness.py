"""Successive-adaptation protocol, baselines, and timing benches.

A rotating 2-D blob generator stands in for image benchmarks with a continuous
domain index: class clusters sit on a circle and each domain rotates the whole
distribution a fixed number of degrees, so labels are rotation-invariant while
the marginal drifts smoothly. Methods stream every domain one sample at a time
and are re-scored on a held-out source split after each domain.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .bn_adapt import BnLayer, bn_entropy_step, bn_forward
from .classifier import AdaptConfig, Prediction, adapt_step, predict
from .core_math import softmax
from .errors import BadParams
from .memory_bank import MemoryBank, NeighborSet, Source
from .trainer import EncoderParams, encode_batch

BASELINE_KINDS = ("frozen_linear", "prototype", "entropy_head", "adanpc", "adanpc_bn")


@dataclass(frozen=True)
class Dataset:
    x: np.ndarray
    y: np.ndarray
    domain_id: int

    def __len__(self):
        return len(self.x)


@dataclass
class DomainSequence:
    domains: list[Dataset]
    source_heldout: Dataset
    angles_deg: tuple[float, ...]
    base_centers: np.ndarray  # (n_classes, 2), pre-rotation, pre-embedding
    sigma: float
    seed: int
    embed: np.ndarray | None = None  # (embed_dim, 2) orthonormal columns

    @property
    def n_classes(self) -> int:
        return len(self.base_centers)

    @property
    def dim(self) -> int:
        return self.domains[0].x.shape[1]

    def domain_centers(self, i: int) -> np.ndarray:
        """Generator cluster centers of domain i in the original 2-D plane."""
        return self.base_centers @ _rotation(self.angles_deg[i]).T


def _rotation(angle_deg: float) -> np.ndarray:
    a = math.radians(angle_deg)
    return np.array([[math.cos(a), -math.sin(a)], [math.sin(a), math.cos(a)]])


def make_rotated_sequence(
    n_domains: int,
    angle_step_deg: float,
    n_per_domain: int,
    n_classes: int,
    seed: int,
    embed_dim: int | None = None,
    sigma: float = 0.3,
    radius: float = 2.0,
    n_heldout: int | None = None,
) -> DomainSequence:
    if n_domains < 2:
        raise BadParams("need at least two domains")
    if n_classes < 2:
        raise BadParams("need at least two classes")
    if n_per_domain < n_classes:
        raise BadParams("need at least one sample per class")
    if embed_dim is not None and embed_dim < 2:
        raise BadParams("embed_dim must be >= 2")
    rng = np.random.default_rng(seed)
    angles = np.arange(n_classes) * 2.0 * math.pi / n_classes
    base_centers = radius * np.column_stack([np.cos(angles), np.sin(angles)])
    embed = None
    if embed_dim is not None:
        # orthonormal columns make the lift an isometry of the 2-D plane
        embed, _ = np.linalg.qr(rng.normal(size=(embed_dim, 2)))

    def draw(n: int, angle_deg: float, domain_id: int) -> Dataset:
        labels = rng.integers(0, n_classes, size=n)
        pts = base_centers[labels] + sigma * rng.normal(size=(n, 2))
        pts = pts @ _rotation(angle_deg).T
        if embed is not None:
            pts = pts @ embed.T
        return Dataset(x=pts, y=labels, domain_id=domain_id)

    domain_angles = tuple(i * angle_step_deg for i in range(n_domains))
    domains = [draw(n_per_domain, a, i) for i, a in enumerate(domain_angles)]
    heldout = draw(n_heldout if n_heldout is not None else n_per_domain, 0.0, 0)
    return DomainSequence(
        domains=domains,
        source_heldout=heldout,
        angles_deg=domain_angles,
        base_centers=base_centers,
        sigma=sigma,
        seed=seed,
        embed=embed,
    )


@dataclass(frozen=True)
class BaselineSpec:
    kind: str
    k: int = 10
    margin: float | None = None
    # streaming entropy descent needs large steps to move within one domain;
    # the resulting boundary drift is the failure mode this baseline exhibits
    lr: float = 0.1
    bn_lr: float = 1e-3
    bn_every: int = 16
    bn_momentum: float = 0.05

    def __post_init__(self):
        if self.kind not in BASELINE_KINDS:
            raise BadParams(f"unknown baseline kind {self.kind!r}")
        if self.k < 1 or self.lr < 0 or self.bn_lr < 0 or self.bn_every < 1:
            raise BadParams("nonpositive baseline hyperparameter")


def _empty_neighbors() -> NeighborSet:
    return NeighborSet(neighbors=())


def _head_prediction(logits: np.ndarray) -> Prediction:
    probs = softmax(logits)
    label = int(np.argmax(probs))
    return Prediction(
        label=label,
        confidence=float(probs[label]),
        probs=probs,
        class_scores=logits,
        neighbors=_empty_neighbors(),
    )


def _train_softmax_head(
    features: np.ndarray, labels: np.ndarray, n_classes: int, seed: int,
    iters: int = 300, lr: float = 0.5,
) -> tuple[np.ndarray, np.ndarray]:
    """Full-batch gradient descent on multinomial cross-entropy."""
    rng = np.random.default_rng(seed)
    d = features.shape[1]
    W = 0.01 * rng.normal(size=(n_classes, d))
    b = np.zeros(n_classes)
    onehot = np.eye(n_classes)[labels]
    n = len(features)
    for _ in range(iters):
        z = features @ W.T + b
        z -= z.max(axis=1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(axis=1, keepdims=True)
        g = (p - onehot) / n
        W -= lr * (g.T @ features)
        b -= lr * g.sum(axis=0)
    return W, b


class _FrozenLinear:
    mutates = False

    def __init__(self, features, labels, n_classes, spec, seed):
        self.W, self.b = _train_softmax_head(features, labels, n_classes, seed)

    def predict(self, f: np.ndarray) -> Prediction:
        return _head_prediction(self.W @ f + self.b)

    def step(self, f: np.ndarray) -> Prediction:
        return self.predict(f)


class _EntropyHead:
    """Streaming entropy minimization on the linear head's weights."""

    mutates = True

    def __init__(self, features, labels, n_classes, spec, seed):
        self.W, self.b = _train_softmax_head(features, labels, n_classes, seed)
        self.lr = spec.lr

    def predict(self, f: np.ndarray) -> Prediction:
        return _head_prediction(self.W @ f + self.b)

    def step(self, f: np.ndarray) -> Prediction:
        pred = self.predict(f)
        p = pred.probs
        with np.errstate(divide="ignore", invalid="ignore"):
            logp = np.where(p > 0, np.log(np.where(p > 0, p, 1.0)), 0.0)
        entropy = float(-(p * logp).sum())
        dz = np.where(p > 0, -p * (logp + entropy), 0.0)
        # descend: z = W f + b, dH/dW = outer(dH/dz, f)
        self.W -= self.lr * np.outer(dz, f)
        self.b -= self.lr * dz
        return pred


class _Prototype:
    """Class centroids nudged by confident test features (running mean)."""

    mutates = True

    def __init__(self, features, labels, n_classes, spec, seed):
        self.centroids = np.vstack(
            [features[labels == c].mean(axis=0) for c in range(n_classes)]
        )
        self.counts = np.bincount(labels, minlength=n_classes).astype(np.int64)
        self.margin = spec.margin if spec.margin is not None else AdaptConfig(
            k=spec.k
        ).resolve_margin(n_classes)

    def predict(self, f: np.ndarray) -> Prediction:
        norms = np.linalg.norm(self.centroids, axis=1) * max(np.linalg.norm(f), 1e-30)
        sims = self.centroids @ f / np.where(norms > 0, norms, 1.0)
        return _head_prediction(sims)

    def step(self, f: np.ndarray) -> Prediction:
        pred = self.predict(f)
        if pred.confidence > self.margin:
            c = pred.label
            self.centroids[c] += (f - self.centroids[c]) / (self.counts[c] + 1)
            self.counts[c] += 1
        return pred


class _AdaNpc:
    mutates = True

    def __init__(self, features, labels, n_classes, spec, seed):
        self.bank = MemoryBank(dim=features.shape[1], num_classes=n_classes)
        self.bank.insert_batch(features, labels, [Source() for _ in labels])
        self.config = AdaptConfig(k=spec.k, margin=spec.margin)

    def predict(self, f: np.ndarray) -> Prediction:
        return predict(self.bank, f, self.config.k)

    def step(self, f: np.ndarray) -> Prediction:
        pred, _, _ = adapt_step(self.bank, f, self.config)
        return pred


class _AdaNpcBn:
    """Memory voting behind a feature-space BN layer adapted by entropy."""

    mutates = True

    def __init__(self, features, labels, n_classes, spec, seed):
        mean = features.mean(axis=0)
        var = features.var(axis=0)
        self.bn = BnLayer(
            gamma=np.ones(features.shape[1]),
            beta=np.zeros(features.shape[1]),
            running_mean=mean,
            running_var=np.maximum(var, 1e-12),
            momentum=spec.bn_momentum,
        )
        normalized, _ = bn_forward(self.bn, features, mode="eval")
        self.bank = MemoryBank(dim=features.shape[1], num_classes=n_classes)
        self.bank.insert_batch(normalized, labels, [Source() for _ in labels])
        self.config = AdaptConfig(k=spec.k, margin=spec.margin)
        self.spec = spec
        self._buffer: list[np.ndarray] = []

    def predict(self, f: np.ndarray) -> Prediction:
        z, _ = bn_forward(self.bn, f, mode="eval")
        return predict(self.bank, z, self.config.k)

    def step(self, f: np.ndarray) -> Prediction:
        z, self.bn = bn_forward(self.bn, f, mode="train")
        pred, _, _ = adapt_step(self.bank, z, self.config)
        self._buffer.append(np.asarray(f, dtype=np.float64))
        if len(self._buffer) >= self.spec.bn_every:
            self.bn, _, _ = bn_entropy_step(
                self.bn, self.bank, np.array(self._buffer), self.config.k, self.spec.bn_lr
            )
            self._buffer.clear()
        return pred


_BASELINES = {
    "frozen_linear": _FrozenLinear,
    "prototype": _Prototype,
    "entropy_head": _EntropyHead,
    "adanpc": _AdaNpc,
    "adanpc_bn": _AdaNpcBn,
}


def init_baseline(spec: BaselineSpec, features, labels, n_classes: int, seed: int):
    return _BASELINES[spec.kind](
        np.asarray(features, dtype=np.float64),
        np.asarray(labels, dtype=np.int64),
        n_classes,
        spec,
        seed,
    )


def baseline_predict_adapt(state, x) -> tuple[Prediction, object]:
    """One adapt-and-predict step; returns the (possibly mutated) state."""
    return state.step(np.asarray(x, dtype=np.float64)), state


@dataclass
class SuccessiveTrace:
    method: str
    seed: int
    pre_source_accuracy: float
    domain_ids: list[int]
    during_accuracy: list[float]
    source_accuracy: list[float]
    source_entries_before: int | None = None
    source_entries_after: int | None = None


def _batch_accuracy(state, features: np.ndarray, labels: np.ndarray) -> float:
    hits = sum(state.predict(f).label == int(y) for f, y in zip(features, labels))
    return hits / len(labels)


def run_successive(
    sequence: DomainSequence,
    method: BaselineSpec,
    encoder: EncoderParams | None = None,
    seed: int = 0,
) -> SuccessiveTrace:
    """Stream domains d1..dn through the method, re-scoring d0 after each.

    The held-out source split never enters any adaptation path; during-domain
    accuracy counts each prediction before the sample can influence the state.
    """
    enc = (lambda X: encode_batch(encoder, X)) if encoder is not None else (
        lambda X: np.asarray(X, dtype=np.float64)
    )
    d0 = sequence.domains[0]
    n_classes = sequence.n_classes
    state = init_baseline(method, enc(d0.x), d0.y, n_classes, seed)
    heldout_f = enc(sequence.source_heldout.x)
    heldout_y = sequence.source_heldout.y

    bank = getattr(state, "bank", None)
    source_before = bank.source_count() if bank is not None else None
    pre = _batch_accuracy(state, heldout_f, heldout_y)

    rng = np.random.default_rng(seed)
    domain_ids: list[int] = []
    during: list[float] = []
    source_acc: list[float] = []
    for dom in sequence.domains[1:]:
        feats = enc(dom.x)
        order = rng.permutation(len(dom))
        hits = 0
        for row in order:
            pred, state = baseline_predict_adapt(state, feats[row])
            hits += pred.label == int(dom.y[row])
        domain_ids.append(dom.domain_id)
        during.append(hits / len(dom))
        source_acc.append(_batch_accuracy(state, heldout_f, heldout_y))

    bank = getattr(state, "bank", None)
    return SuccessiveTrace(
        method=method.kind,
        seed=seed,
        pre_source_accuracy=pre,
        domain_ids=domain_ids,
        during_accuracy=during,
        source_accuracy=source_acc,
        source_entries_before=source_before,
        source_entries_after=bank.source_count() if bank is not None else None,
    )


def write_successive_csv(traces: list[SuccessiveTrace], path) -> None:
    """One row per (seed, domain); domain_index 0 carries the pre-adaptation score."""
    lines = [
        "# successive adaptation trace: during_accuracy is online (predict before adapt)",
        "# domain_index 0 rows give held-out source accuracy before any adaptation",
        "method,seed,domain_index,during_accuracy,source_accuracy",
    ]
    for tr in traces:
        lines.append(f"{tr.method},{tr.seed},0,,{tr.pre_source_accuracy!r}")
        for i, dom_id in enumerate(tr.domain_ids):
            lines.append(
                f"{tr.method},{tr.seed},{dom_id},{tr.during_accuracy[i]!r},{tr.source_accuracy[i]!r}"
            )
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


# -- inference benchmarking ----------------------------------------------------


@dataclass
class BenchRow:
    variant: str
    bank_size: int
    n_clusters: int | None
    nprobe: int | None
    p50_us: float
    p95_us: float
    qps: float
    recall_at_k: float


@dataclass
class BenchReport:
    d: int
    k: int
    n_queries: int
    seed: int
    rows: list[BenchRow] = field(default_factory=list)


def _blob_bank(n: int, d: int, n_classes: int, seed: int) -> tuple[MemoryBank, np.ndarray]:
    """Cluster-structured vectors, the geometry trained encoders produce.

    Isotropic random vectors in high dimension make every inverted list equally
    relevant and any probe subset miss; class-clustered data is the workload
    the index exists for.
    """
    rng = np.random.default_rng(seed)
    n_centers = max(n_classes, 80)
    # center norms ~ sqrt(d) keep the 0.35 jitter angularly small at every d
    centers = rng.normal(size=(n_centers, d))
    which = rng.integers(0, n_centers, size=n)
    feats = centers[which] + 0.35 * rng.normal(size=(n, d))
    labels = which % n_classes
    bank = MemoryBank(dim=d, num_classes=n_classes)
    bank.insert_batch(feats, labels, [Source() for _ in range(n)])
    queries = centers[rng.integers(0, n_centers, size=256)] + 0.35 * rng.normal(
        size=(256, d)
    )
    return bank, queries


def bench_inference(
    sizes: tuple[int, ...],
    d: int = 128,
    k: int = 10,
    variants: tuple[str, ...] = ("exact", "ivf"),
    n_queries: int = 200,
    seed: int = 0,
    probe_divisor: int = 16,
) -> BenchReport:
    """Per-query latency percentiles and recall for each (variant, bank size).

    Every IVF run is first gated on full-probe equality with exact search over
    the benchmark queries, so the timings describe a correct index.
    """
    report = BenchReport(d=d, k=k, n_queries=n_queries, seed=seed)
    for size in sizes:
        bank, queries = _blob_bank(size, d, n_classes=10, seed=seed)
        qs = queries[:n_queries]
        exact_sets = [bank.knn_exact(q, k) for q in qs]
        for variant in variants:
            if variant == "exact":
                times = _time_queries(lambda q: bank.knn_exact(q, k), qs)
                report.rows.append(
                    BenchRow(
                        variant="exact",
                        bank_size=size,
                        n_clusters=None,
                        nprobe=None,
                        p50_us=float(np.percentile(times, 50)),
                        p95_us=float(np.percentile(times, 95)),
                        qps=float(len(qs) / (times.sum() / 1e6)),
                        recall_at_k=1.0,
                    )
                )
            elif variant == "ivf":
                n_clusters = max(8, round(math.sqrt(size)))
                nprobe = max(1, n_clusters // probe_divisor)
                bank.build_ivf(n_clusters, seed=seed)
                for q, want in zip(qs, exact_sets):
                    got = bank.knn_ivf(q, k, nprobe=n_clusters)
                    if got.neighbors != want.neighbors:
                        raise AssertionError("full-probe IVF disagrees with exact search")
                hits = 0
                for q, want in zip(qs, exact_sets):
                    got_ids = set(bank.knn_ivf(q, k, nprobe=nprobe).ids())
                    hits += len(got_ids & set(want.ids()))
                recall = hits / (len(qs) * k)
                times = _time_queries(lambda q: bank.knn_ivf(q, k, nprobe=nprobe), qs)
                report.rows.append(
                    BenchRow(
                        variant="ivf",
                        bank_size=size,
                        n_clusters=n_clusters,
                        nprobe=nprobe,
                        p50_us=float(np.percentile(times, 50)),
                        p95_us=float(np.percentile(times, 95)),
                        qps=float(len(qs) / (times.sum() / 1e6)),
                        recall_at_k=recall,
                    )
                )
            else:
                raise BadParams(f"unknown variant {variant!r}")
    return report


def _time_queries(fn, queries) -> np.ndarray:
    for q in queries[:8]:  # warm caches before measuring
        fn(q)
    out = np.empty(len(queries))
    for i, q in enumerate(queries):
        t0 = time.perf_counter_ns()
        fn(q)
        out[i] = (time.perf_counter_ns() - t0) / 1e3
    return out


def write_bench_csv(report: BenchReport, path) -> None:
    lines = [
        f"# inference bench: d={report.d} k={report.k} queries={report.n_queries} seed={report.seed}",
        "# latencies in microseconds, single query at a time, single thread",
        "variant,bank_size,n_clusters,nprobe,p50_us,p95_us,qps,recall_at_k",
    ]
    for r in report.rows:
        lines.append(
            f"{r.variant},{r.bank_size},{r.n_clusters if r.n_clusters is not None else ''},"
            f"{r.nprobe if r.nprobe is not None else ''},{r.p50_us!r},{r.p95_us!r},"
            f"{r.qps!r},{r.recall_at_k!r}"
        )
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
