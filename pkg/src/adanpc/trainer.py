"""Encoder training with the neighborhood-contrast loss.

Each sample is pulled toward same-label entries of a small FIFO feature memory
and pushed from different-label ones: loss_i = -log(sum_pos e_j / sum_all e_j)
with e_j = exp(cos(h(x_i), m_j) / tau) over the k nearest entries. Neighbor
sets change with the encoder non-differentiably, so optimization is EM-style:
gradients treat the sets and the stored features as constants, and the memory
is re-encoded with the current encoder every refresh_period steps.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .bn_adapt import BnLayer, bn_forward
from .errors import BadParams, DimMismatch, ShapeMismatch
from .memory_bank import MemoryBank, Source

ADAM_EPS = 1e-8


@dataclass
class EncoderParams:
    """Plain MLP: x @ W + b per layer, ReLU between layers, none after the last."""

    layers: list[tuple[np.ndarray, np.ndarray]]
    bn: BnLayer | None = None

    def __post_init__(self):
        if not self.layers:
            raise BadParams("encoder needs at least one layer")
        prev = None
        for i, (w, b) in enumerate(self.layers):
            if w.ndim != 2 or b.ndim != 1 or w.shape[1] != b.shape[0]:
                raise ShapeMismatch(f"layer {i}: weight {w.shape} / bias {b.shape}")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ValueError(f"layer {i} has non-finite values")
            if prev is not None and w.shape[0] != prev:
                raise ShapeMismatch(f"layer {i} input {w.shape[0]} != previous output {prev}")
            prev = w.shape[1]
        if self.bn is not None and self.bn.dim != prev:
            raise ShapeMismatch("BN width does not match feature width")

    @property
    def dims(self) -> tuple[int, ...]:
        return (self.layers[0][0].shape[0],) + tuple(w.shape[1] for w, _ in self.layers)

    @property
    def input_dim(self) -> int:
        return self.layers[0][0].shape[0]

    @property
    def feature_dim(self) -> int:
        return self.layers[-1][0].shape[1]

    def copy(self) -> "EncoderParams":
        return EncoderParams(
            layers=[(w.copy(), b.copy()) for w, b in self.layers], bn=self.bn
        )


def init_encoder(dims: tuple[int, ...], seed: int = 0) -> EncoderParams:
    """He-scaled random weights, zero biases."""
    if len(dims) < 2:
        raise BadParams("dims needs input and output sizes")
    rng = np.random.default_rng(seed)
    layers = []
    for d_in, d_out in zip(dims[:-1], dims[1:]):
        w = rng.normal(size=(d_in, d_out)) * np.sqrt(2.0 / d_in)
        layers.append((w, np.zeros(d_out)))
    return EncoderParams(layers=layers)


@dataclass(frozen=True)
class KnnLossConfig:
    k: int = 10
    tau: float = 0.1
    bank_capacity: int = 1000
    refresh_period: int = 100
    epsilon_log: float = 1e-12
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    batch_size: int = 32
    iterations: int = 500

    def __post_init__(self):
        if self.k < 1 or self.bank_capacity < 1 or self.batch_size < 1:
            raise BadParams("k, bank_capacity, batch_size must be positive")
        if self.tau <= 0:
            raise BadParams("tau must be positive")
        if not (0.0 < self.epsilon_log <= 1e-6):
            raise BadParams("epsilon_log must lie in (0, 1e-6]")
        if self.refresh_period < 1 or self.iterations < 0:
            raise BadParams("refresh_period must be >= 1 and iterations >= 0")
        if self.learning_rate <= 0 or not (0 <= self.beta1 < 1) or not (0 <= self.beta2 < 1):
            raise BadParams("bad Adam hyperparameters")


@dataclass
class AdamState:
    m: list[tuple[np.ndarray, np.ndarray]]
    v: list[tuple[np.ndarray, np.ndarray]]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: EncoderParams) -> "AdamState":
        return cls(
            m=[(np.zeros_like(w), np.zeros_like(b)) for w, b in params.layers],
            v=[(np.zeros_like(w), np.zeros_like(b)) for w, b in params.layers],
        )


@dataclass
class LabeledDataset:
    """Raw training triples; domain ids tag the provenance of bank entries."""

    x: np.ndarray
    y: np.ndarray
    domain: np.ndarray

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        self.domain = np.asarray(self.domain, dtype=np.int64)
        if self.x.ndim != 2 or len(self.y) != len(self.x) or len(self.domain) != len(self.x):
            raise ShapeMismatch("dataset arrays disagree on length")

    def __len__(self):
        return len(self.x)


def _forward_trace(params: EncoderParams, xs: np.ndarray):
    """Batched forward pass keeping activations for backprop.

    Returns (features, acts, pres): acts[l] is the input to layer l, pres[l]
    its pre-activation output. The optional BN runs in eval mode.
    """
    a = xs
    acts, pres = [], []
    last = len(params.layers) - 1
    for l, (w, b) in enumerate(params.layers):
        acts.append(a)
        z = a @ w + b
        pres.append(z)
        a = np.maximum(z, 0.0) if l < last else z
    if params.bn is not None:
        a, _ = bn_forward(params.bn, a, mode="eval")
    return a, acts, pres


def encoder_forward(params: EncoderParams, x) -> np.ndarray:
    """Deterministic feature for one input vector."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 1 or arr.shape[0] != params.input_dim:
        raise DimMismatch(f"input shape {arr.shape} != ({params.input_dim},)")
    out, _, _ = _forward_trace(params, arr[None, :])
    return out[0]


def encode_batch(params: EncoderParams, xs) -> np.ndarray:
    arr = np.asarray(xs, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != params.input_dim:
        raise DimMismatch(f"batch shape {arr.shape} != (n, {params.input_dim})")
    out, _, _ = _forward_trace(params, arr)
    return out


def _self_match_ids(bank: MemoryBank, feature: np.ndarray) -> set[int]:
    """Ids of bank entries storing bit-identical copies of this feature."""
    norm = np.linalg.norm(feature)
    if norm < 1e-30:
        return set()
    stored = (feature / norm).astype(np.float32).astype(np.float64)
    rows = np.flatnonzero(np.all(bank.features == stored, axis=1))
    return {int(bank.ids[r]) for r in rows}


def contrast_loss(sims: np.ndarray, positive: np.ndarray, tau: float, epsilon_log: float):
    """Loss for one sample given its neighbor similarities and label matches.

    -log((sum_pos e + eps) / (sum_all e + eps)) with e_j = exp(sims_j / tau).
    Returns (loss, dloss/dsims). Scaling tau -> tau/c is exactly equivalent to
    scaling sims -> c*sims.
    """
    e = np.exp(np.asarray(sims, dtype=np.float64) / tau)
    positive = np.asarray(positive, dtype=bool)
    p_sum = float(e[positive].sum()) + epsilon_log
    d_sum = float(e.sum()) + epsilon_log
    loss = float(np.log(d_sum) - np.log(p_sum))
    dsims = (e / d_sum - np.where(positive, e / p_sum, 0.0)) / tau
    return loss, dsims


def training_neighbors(params: EncoderParams, batch_x, bank: MemoryBank, config: KnnLossConfig):
    """Neighbor sets the loss will use: k nearest, bit-identical copies skipped."""
    feats = encode_batch(params, batch_x)
    return [
        bank.knn_exact(f, config.k, exclude=_self_match_ids(bank, f)) for f in feats
    ]


def _loss_terms(params: EncoderParams, batch_x, batch_y, bank: MemoryBank, config: KnnLossConfig):
    """Per-sample loss pieces plus everything the backward pass needs."""
    feats, acts, pres = _forward_trace(params, batch_x)
    n = feats.shape[0]
    losses = np.zeros(n)
    feat_grads = np.zeros_like(feats)
    for i in range(n):
        f = feats[i]
        neighbors = bank.knn_exact(f, config.k, exclude=_self_match_ids(bank, f))
        sims = np.array([s for _, s in neighbors])
        labels = np.array([bank.label_of(eid) for eid, _ in neighbors])
        losses[i], dw = contrast_loss(
            sims, labels == batch_y[i], config.tau, config.epsilon_log
        )
        fnorm = np.linalg.norm(f)
        fhat = f / fnorm
        g = np.zeros_like(f)
        for j, (eid, _) in enumerate(neighbors):
            m_j = bank.entry(eid).feature
            g += dw[j] * (m_j - sims[j] * fhat) / fnorm
        feat_grads[i] = g
    return losses, feat_grads, acts, pres


def _backprop(params: EncoderParams, feat_grads, acts, pres):
    """Push mean-loss feature gradients back through BN scale and the MLP."""
    n = feat_grads.shape[0]
    delta = feat_grads.copy()
    if params.bn is not None:
        delta *= params.bn.gamma / np.sqrt(params.bn.running_var + params.bn.eps)
    grads: list[tuple[np.ndarray, np.ndarray]] = [None] * len(params.layers)
    for l in range(len(params.layers) - 1, -1, -1):
        grads[l] = (acts[l].T @ delta / n, delta.sum(axis=0) / n)
        if l > 0:
            delta = (delta @ params.layers[l][0].T) * (pres[l - 1] > 0)
    return grads


def _prepare_batch(params, batch, bank):
    xs = np.asarray([x for x, _ in batch], dtype=np.float64)
    ys = np.asarray([y for _, y in batch], dtype=np.int64)
    if len(xs) == 0:
        raise BadParams("batch is empty")
    if xs.shape[1] != params.input_dim:
        raise DimMismatch("batch input width != encoder input width")
    if params.feature_dim != bank.dim:
        raise DimMismatch("encoder feature width != bank dim")
    return xs, ys


def knn_loss(params: EncoderParams, batch, bank: MemoryBank, config: KnnLossConfig):
    """Mean neighborhood-contrast loss and the per-sample values."""
    xs, ys = _prepare_batch(params, batch, bank)
    losses, _, _, _ = _loss_terms(params, xs, ys, bank, config)
    return float(losses.mean()), [float(v) for v in losses]


def knn_loss_grad(params: EncoderParams, batch, bank: MemoryBank, config: KnnLossConfig):
    """Analytic gradient of knn_loss in the shape of params.layers."""
    xs, ys = _prepare_batch(params, batch, bank)
    _, feat_grads, acts, pres = _loss_terms(params, xs, ys, bank, config)
    return _backprop(params, feat_grads, acts, pres)


def knn_loss_and_grad(params, batch, bank, config):
    """One-pass variant used by the training loop."""
    xs, ys = _prepare_batch(params, batch, bank)
    losses, feat_grads, acts, pres = _loss_terms(params, xs, ys, bank, config)
    return float(losses.mean()), _backprop(params, feat_grads, acts, pres)


def adam_step(
    params: EncoderParams, grads, state: AdamState, config: KnnLossConfig
) -> tuple[EncoderParams, AdamState]:
    """Standard bias-corrected Adam over all layer weights and biases."""
    if len(grads) != len(params.layers):
        raise ShapeMismatch("gradient layer count mismatch")
    t = state.step + 1
    new_layers, new_m, new_v = [], [], []
    for (w, b), (gw, gb), (mw, mb), (vw, vb) in zip(
        params.layers, grads, state.m, state.v
    ):
        if gw.shape != w.shape or gb.shape != b.shape:
            raise ShapeMismatch("gradient shape mismatch")
        mw = config.beta1 * mw + (1 - config.beta1) * gw
        mb = config.beta1 * mb + (1 - config.beta1) * gb
        vw = config.beta2 * vw + (1 - config.beta2) * gw**2
        vb = config.beta2 * vb + (1 - config.beta2) * gb**2
        bc1 = 1 - config.beta1**t
        bc2 = 1 - config.beta2**t
        w = w - config.learning_rate * (mw / bc1) / (np.sqrt(vw / bc2) + ADAM_EPS)
        b = b - config.learning_rate * (mb / bc1) / (np.sqrt(vb / bc2) + ADAM_EPS)
        new_layers.append((w, b))
        new_m.append((mw, mb))
        new_v.append((vw, vb))
    return (
        EncoderParams(layers=new_layers, bn=params.bn),
        AdamState(m=new_m, v=new_v, step=t),
    )


def train(
    params: EncoderParams,
    dataset: LabeledDataset,
    config: KnnLossConfig,
    seed: int = 0,
    on_step=None,
) -> tuple[EncoderParams, list[tuple[int, float]]]:
    """Online loop: sample a batch, take the loss against the current memory,
    push the batch in (FIFO), update with Adam; periodically re-encode the
    memory with the current encoder. Returns the trained encoder and the
    (step, loss) trace.
    """
    if len(dataset) == 0:
        raise BadParams("dataset is empty")
    rng = np.random.default_rng(seed)
    num_classes = int(dataset.y.max()) + 1
    bank = MemoryBank(
        dim=params.feature_dim, num_classes=num_classes, capacity=config.bank_capacity
    )
    raw_by_id: dict[int, int] = {}  # entry id -> dataset row, for the refresh

    def push(rows):
        feats = encode_batch(params, dataset.x[rows])
        provs = [Source(int(d)) for d in dataset.domain[rows]]
        new_ids = bank.insert_batch(feats, dataset.y[rows], provs)
        for entry_id, row in zip(new_ids, rows):
            raw_by_id[entry_id] = int(row)
        lowest = int(bank.ids[0])
        for entry_id in [e for e in raw_by_id if e < lowest]:
            del raw_by_id[entry_id]

    init_rows = rng.choice(
        len(dataset), size=min(config.bank_capacity, len(dataset)), replace=False
    )
    push(init_rows)

    trace: list[tuple[int, float]] = []
    state = AdamState.zeros_like(params)
    for step in range(1, config.iterations + 1):
        rows = rng.integers(0, len(dataset), size=config.batch_size)
        batch = [(dataset.x[r], int(dataset.y[r])) for r in rows]
        loss, grads = knn_loss_and_grad(params, batch, bank, config)
        push(rows)
        params, state = adam_step(params, grads, state, config)
        assert len(bank) <= config.bank_capacity
        if step % config.refresh_period == 0:
            for entry_id in [int(i) for i in bank.ids]:
                fresh = encoder_forward(params, dataset.x[raw_by_id[entry_id]])
                bank.replace_feature(entry_id, fresh)
        trace.append((step, loss))
        if on_step is not None:
            on_step(step, loss, params, bank)
    return params, trace
