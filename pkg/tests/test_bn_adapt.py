import math

import numpy as np
import pytest

from adanpc.bn_adapt import BnLayer, bn_entropy_step, bn_forward
from adanpc.errors import DimMismatch, EmptyBank
from adanpc.memory_bank import MemoryBank, Source


def make_instance(seed, dim=4, n_bank=20, c=3, n_q=2):
    rng = np.random.default_rng(seed)
    layer = BnLayer(
        gamma=rng.uniform(0.5, 1.5, dim),
        beta=rng.normal(size=dim) * 0.2,
        running_mean=rng.normal(size=dim) * 0.3,
        running_var=rng.uniform(0.5, 2.0, dim),
    )
    bank = MemoryBank(dim=dim, num_classes=c)
    bank.insert_batch(
        rng.normal(size=(n_bank, dim)), rng.integers(0, c, n_bank), [Source(0)] * n_bank
    )
    queries = rng.normal(size=(n_q, dim))
    return layer, bank, queries


def entropy_of(p):
    return -math.fsum(v * math.log(v) for v in p if v > 0)


def frozen_entropy(gamma, beta, xhat_rows, frozen_sets, num_classes):
    """Mean vote entropy with neighbor (feature, label) lists pinned."""
    total = 0.0
    for xhat, neigh in zip(xhat_rows, frozen_sets):
        z = gamma * xhat + beta
        zn = math.sqrt(math.fsum(v * v for v in z))
        scores = [0.0] * num_classes
        for feat, lab in neigh:
            scores[lab] += math.fsum(a * b for a, b in zip(z, feat)) / zn
        m = max(scores)
        ex = [math.exp(s - m) for s in scores]
        tot = math.fsum(ex)
        total += entropy_of([v / tot for v in ex])
    return total / len(xhat_rows)


class TestBnForward:
    def test_identity_eval(self):
        layer = BnLayer.identity(3)
        x = np.array([0.4, -1.2, 2.0])
        out, same = bn_forward(layer, x, mode="eval")
        np.testing.assert_allclose(out, x, rtol=1e-4)
        assert same is layer  # eval mode is stateless

    def test_zero_gamma_gives_beta(self):
        layer = BnLayer(
            gamma=np.zeros(2),
            beta=np.array([3.0, -1.0]),
            running_mean=np.zeros(2),
            running_var=np.ones(2),
        )
        out, _ = bn_forward(layer, [100.0, -50.0], mode="eval")
        np.testing.assert_array_equal(out, [3.0, -1.0])

    def test_batch_matches_hand_formula(self):
        layer = BnLayer(
            gamma=np.array([2.0, 0.5]),
            beta=np.array([1.0, -1.0]),
            running_mean=np.zeros(2),
            running_var=np.ones(2),
            momentum=0.1,
        )
        batch = np.array([[1.0, 4.0], [3.0, 0.0]])
        mu = batch.mean(axis=0)
        var = batch.var(axis=0)
        want = (batch - mu) / np.sqrt(var + layer.eps) * layer.gamma + layer.beta
        out, updated = bn_forward(layer, batch, mode="train")
        np.testing.assert_allclose(out, want, atol=1e-12)
        np.testing.assert_allclose(updated.running_mean, 0.1 * mu, atol=1e-12)
        np.testing.assert_allclose(updated.running_var, 0.9 * 1.0 + 0.1 * var, atol=1e-12)

    def test_streaming_single_sample(self):
        layer = BnLayer.identity(2, momentum=0.25)
        x = np.array([2.0, -4.0])
        out, updated = bn_forward(layer, x, mode="train")
        want_mean = 0.75 * 0.0 + 0.25 * x
        want_var = 0.75 * 1.0 + 0.25 * (x - want_mean) ** 2
        np.testing.assert_allclose(updated.running_mean, want_mean, atol=1e-12)
        np.testing.assert_allclose(updated.running_var, want_var, atol=1e-12)
        want_out = (x - want_mean) / np.sqrt(want_var + layer.eps)
        np.testing.assert_allclose(out, want_out, atol=1e-12)

    def test_streaming_is_order_dependent_but_replayable(self):
        layer = BnLayer.identity(2)
        a, b = np.array([1.0, 0.0]), np.array([0.0, 1.0])

        def run(seq):
            cur = layer
            for x in seq:
                _, cur = bn_forward(cur, x, mode="train")
            return cur

        ab1, ab2, ba = run([a, b]), run([a, b]), run([b, a])
        np.testing.assert_array_equal(ab1.running_mean, ab2.running_mean)
        assert not np.allclose(ab1.running_mean, ba.running_mean)

    def test_eval_deterministic(self):
        layer, _, queries = make_instance(50)
        o1, _ = bn_forward(layer, queries, mode="eval")
        o2, _ = bn_forward(layer, queries, mode="eval")
        np.testing.assert_array_equal(o1, o2)

    def test_dim_mismatch(self):
        layer = BnLayer.identity(3)
        with pytest.raises(DimMismatch):
            bn_forward(layer, [1.0, 2.0], mode="eval")

    def test_bad_mode(self):
        with pytest.raises(ValueError):
            bn_forward(BnLayer.identity(2), [1.0, 2.0], mode="test")

    def test_validation(self):
        with pytest.raises(ValueError):
            BnLayer(
                gamma=np.ones(2),
                beta=np.zeros(2),
                running_mean=np.zeros(2),
                running_var=-np.ones(2),
            )
        with pytest.raises(DimMismatch):
            BnLayer(
                gamma=np.ones(3),
                beta=np.zeros(2),
                running_mean=np.zeros(2),
                running_var=np.ones(2),
            )


class TestBnEntropyStep:
    def test_zero_lr_keeps_layer(self):
        layer, bank, queries = make_instance(51)
        updated, before, after = bn_entropy_step(layer, bank, queries, k=5, lr=0.0)
        np.testing.assert_array_equal(updated.gamma, layer.gamma)
        np.testing.assert_array_equal(updated.beta, layer.beta)
        assert before == pytest.approx(after, abs=1e-12)

    def test_single_class_bank_is_stationary(self):
        # one class: the vote is exactly one-hot, entropy exactly 0
        rng = np.random.default_rng(52)
        layer = BnLayer.identity(3)
        bank = MemoryBank(dim=3, num_classes=1)
        bank.insert_batch(rng.normal(size=(8, 3)), [0] * 8, [Source(0)] * 8)
        updated, before, after = bn_entropy_step(layer, bank, rng.normal(size=(2, 3)), k=4, lr=0.5)
        assert before == 0.0 and after == 0.0
        np.testing.assert_allclose(updated.gamma, layer.gamma, atol=1e-9)
        np.testing.assert_allclose(updated.beta, layer.beta, atol=1e-9)

    def test_gradient_matches_finite_differences(self):
        h, tol = 1e-6, 1e-4
        for seed in range(6):
            layer, bank, queries = make_instance(seed, n_q=2)
            xhat = (queries - layer.running_mean) / np.sqrt(layer.running_var + layer.eps)
            frozen = []
            for row in xhat:
                z = layer.gamma * row + layer.beta
                ns = bank.knn_exact(z, 5)
                frozen.append([(bank.entry(i).feature, bank.label_of(i)) for i in ns.ids()])

            lr = 1.0  # makes the update equal to the negative gradient
            updated, _, _ = bn_entropy_step(layer, bank, queries, k=5, lr=lr)
            got_dg = (layer.gamma - updated.gamma) / lr
            got_db = (layer.beta - updated.beta) / lr

            fd_dg = np.zeros_like(layer.gamma)
            fd_db = np.zeros_like(layer.beta)
            for i in range(layer.dim):
                for vec, out in ((layer.gamma.copy(), "g"), (layer.beta.copy(), "b")):
                    up, down = vec.copy(), vec.copy()
                    up[i] += h
                    down[i] -= h
                    if out == "g":
                        hi = frozen_entropy(up, layer.beta, xhat, frozen, bank.num_classes)
                        lo = frozen_entropy(down, layer.beta, xhat, frozen, bank.num_classes)
                        fd_dg[i] = (hi - lo) / (2 * h)
                    else:
                        hi = frozen_entropy(layer.gamma, up, xhat, frozen, bank.num_classes)
                        lo = frozen_entropy(layer.gamma, down, xhat, frozen, bank.num_classes)
                        fd_db[i] = (hi - lo) / (2 * h)
            for got, fd in ((got_dg, fd_dg), (got_db, fd_db)):
                denom = np.maximum(np.abs(got), np.abs(fd))
                rel = np.where(denom > 1e-10, np.abs(got - fd) / np.where(denom > 0, denom, 1.0), 0.0)
                assert rel.max() < tol, f"seed {seed}: rel {rel.max():.2e}"

    def test_frozen_entropy_descends(self):
        lr = 1e-4
        drops = 0
        for seed in range(50):
            layer, bank, queries = make_instance(seed + 100, n_q=3)
            xhat = (queries - layer.running_mean) / np.sqrt(layer.running_var + layer.eps)
            frozen = []
            for row in xhat:
                z = layer.gamma * row + layer.beta
                ns = bank.knn_exact(z, 5)
                frozen.append([(bank.entry(i).feature, bank.label_of(i)) for i in ns.ids()])
            h_before = frozen_entropy(layer.gamma, layer.beta, xhat, frozen, bank.num_classes)
            updated, reported_before, _ = bn_entropy_step(layer, bank, queries, k=5, lr=lr)
            h_after = frozen_entropy(updated.gamma, updated.beta, xhat, frozen, bank.num_classes)
            assert reported_before == pytest.approx(h_before, abs=1e-12)
            assert h_after <= h_before + 1e-9
            drops += h_after < h_before
        assert drops >= 40  # gradient is almost never exactly zero

    def test_empty_bank(self):
        layer = BnLayer.identity(2)
        bank = MemoryBank(dim=2, num_classes=2)
        with pytest.raises(EmptyBank):
            bn_entropy_step(layer, bank, np.array([[1.0, 0.0]]), k=1, lr=0.1)
