"""Release gate: one test per headline requirement, numbered and self-contained.

Run with ``pytest -v tests/test_acceptance.py`` so each criterion reports one
PASSED/FAILED line. Heavy statistical runs (criteria 4, 5, 7, 8) use 30 seeds
and take a couple of minutes together.
"""

import time

import numpy as np
import pytest

from adanpc.classifier import predict
from adanpc.cli import main as cli_main
from adanpc.errors import ChecksumMismatch, FormatVersionMismatch
from adanpc.harness import (
    BaselineSpec,
    bench_inference,
    make_rotated_sequence,
    run_successive,
)
from adanpc.memory_bank import MemoryBank, Source, Target, snapshot_load, snapshot_save
from adanpc.theory_lab import (
    Prop1Config,
    Prop2Config,
    Prop3Config,
    run_prop1,
    run_prop2,
    run_prop3,
    wasserstein1_exact,
)

from test_bn_adapt import frozen_entropy, make_instance
from test_classifier import brute_force_predict
from test_theory_lab import w1_factorial
from test_trainer import (
    flatten,
    frozen_set_loss,
    random_instance,
    training_neighbors,
    unflatten,
)


def test_criterion_01_gradient_correctness():
    from adanpc.bn_adapt import bn_entropy_step
    from adanpc.trainer import KnnLossConfig, knn_loss_grad

    t0 = time.perf_counter()
    h, tol = 1e-6, 1e-4
    cfg = KnnLossConfig(k=4, tau=0.2)
    worst_loss = 0.0
    for seed in range(20):
        params, bank, batch = random_instance(seed)
        frozen = [
            [(bank.entry(i).feature, bank.label_of(i)) for i in ns.ids()]
            for ns in training_neighbors(params, [x for x, _ in batch], bank, cfg)
        ]
        flat_g = flatten(knn_loss_grad(params, batch, bank, cfg))
        theta0 = flatten(params.layers)
        fd = np.zeros_like(theta0)
        for i in range(theta0.size):
            up, down = theta0.copy(), theta0.copy()
            up[i] += h
            down[i] -= h
            fd[i] = (
                frozen_set_loss(unflatten(up, params.layers), batch, frozen, cfg.tau, cfg.epsilon_log)
                - frozen_set_loss(unflatten(down, params.layers), batch, frozen, cfg.tau, cfg.epsilon_log)
            ) / (2 * h)
        denom = np.maximum(np.abs(flat_g), np.abs(fd))
        rel = np.where(denom > 1e-10, np.abs(flat_g - fd) / np.where(denom > 0, denom, 1.0), 0.0)
        worst_loss = max(worst_loss, float(rel.max()))
    assert worst_loss < tol

    worst_bn = 0.0
    for seed in range(20):
        layer, bank, queries = make_instance(seed, n_q=2)
        xhat = (queries - layer.running_mean) / np.sqrt(layer.running_var + layer.eps)
        frozen = []
        for row in xhat:
            z = layer.gamma * row + layer.beta
            ns = bank.knn_exact(z, 5)
            frozen.append([(bank.entry(i).feature, bank.label_of(i)) for i in ns.ids()])
        updated, _, _ = bn_entropy_step(layer, bank, queries, k=5, lr=1.0)
        got = np.concatenate([layer.gamma - updated.gamma, layer.beta - updated.beta])
        fd = np.zeros_like(got)
        for i in range(layer.dim):
            for j, which in ((i, "g"), (layer.dim + i, "b")):
                gam, bet = layer.gamma.copy(), layer.beta.copy()
                vec = gam if which == "g" else bet
                vec[i] += h
                hi = frozen_entropy(gam, bet, xhat, frozen, bank.num_classes)
                vec[i] -= 2 * h
                lo = frozen_entropy(gam, bet, xhat, frozen, bank.num_classes)
                fd[j] = (hi - lo) / (2 * h)
        denom = np.maximum(np.abs(got), np.abs(fd))
        rel = np.where(denom > 1e-10, np.abs(got - fd) / np.where(denom > 0, denom, 1.0), 0.0)
        worst_bn = max(worst_bn, float(rel.max()))
    elapsed = time.perf_counter() - t0
    assert worst_bn < tol
    assert elapsed < 30.0
    print(f"criterion 1 PASS: loss grad rel {worst_loss:.2e}, bn grad rel {worst_bn:.2e}, {elapsed:.1f}s")


def test_criterion_02_prediction_matches_brute_force():
    rng = np.random.default_rng(2002)
    for case in range(1000):
        n = int(rng.integers(1, 201))
        d = int(rng.integers(2, 17))
        c = int(rng.integers(2, 7))
        k = int(rng.integers(1, 21))
        bank = MemoryBank(dim=d, num_classes=c)
        bank.insert_batch(rng.normal(size=(n, d)), rng.integers(0, c, n), [Source(0)] * n)
        q = rng.normal(size=d)
        p = predict(bank, q, k)
        ids, probs, label = brute_force_predict(bank, q, k)
        assert p.neighbors.ids() == ids, f"case {case}"
        assert p.label == label, f"case {case}"
        np.testing.assert_allclose(p.probs, probs, atol=1e-12)
    print("criterion 2 PASS: 1000 random instances match the reference predictor")


def test_criterion_03_ivf_exactness_and_recall():
    rng = np.random.default_rng(3003)
    for case in range(40):
        n = int(rng.integers(30, 301))
        d = int(rng.integers(4, 33))
        n_clusters = int(rng.integers(2, 17))
        bank = MemoryBank(dim=d, num_classes=3)
        bank.insert_batch(rng.normal(size=(n, d)), rng.integers(0, 3, n), [Source(0)] * n)
        bank.build_ivf(n_clusters=n_clusters, seed=case)
        for _ in range(5):
            q = rng.normal(size=d)
            k = int(rng.integers(1, 15))
            assert bank.knn_ivf(q, k, nprobe=n_clusters).neighbors == bank.knn_exact(q, k).neighbors

    rng = np.random.default_rng(42)
    centers = rng.normal(size=(80, 64))
    data = rng.normal(size=(10000, 64)) * 0.35 + centers[rng.integers(0, 80, 10000)]
    bank = MemoryBank(dim=64, num_classes=4)
    bank.insert_batch(data, rng.integers(0, 4, 10000), [Source(0)] * 10000)
    bank.build_ivf(n_clusters=64, seed=0)
    queries = data[rng.integers(0, 10000, 100)] + rng.normal(size=(100, 64)) * 0.1
    hits = 0
    for q in queries:
        hits += len(set(bank.knn_exact(q, 10).ids()) & set(bank.knn_ivf(q, 10, nprobe=8).ids()))
    recall = hits / 1000.0
    assert recall >= 0.9
    print(f"criterion 3 PASS: full-probe exactness on 200 property cases; recall@10 {recall:.3f}")


def test_criterion_04_excess_error_shrinks_with_source_size():
    t0 = time.perf_counter()
    report = run_prop2(
        Prop2Config(n_s_grid=(100, 10000), shift_kinds=("covariate",), seeds=tuple(range(30)))
    )
    elapsed = time.perf_counter() - t0
    by_ns = {a["n_s"]: a for a in report.aggregates}
    assert by_ns[10000]["mean_excess"] < by_ns[100]["mean_excess"]
    assert by_ns[10000]["p_one_sided"] < 0.05
    assert elapsed < 300.0
    print(
        f"criterion 4 PASS: excess {by_ns[100]['mean_excess']:.4f} -> "
        f"{by_ns[10000]['mean_excess']:.4f}, p={by_ns[10000]['p_one_sided']:.2e}, {elapsed:.0f}s"
    )


def test_criterion_05_pseudo_label_bank_beats_source_only():
    report = run_prop3(Prop3Config())
    agg = report.aggregates[0]
    assert agg["mean_diff"] <= 0.0
    assert agg["p_one_sided"] < 0.05
    print(
        f"criterion 5 PASS: mixed {agg['mean_excess_mixed']:.4f} vs source "
        f"{agg['mean_excess_source']:.4f}, p={agg['p_one_sided']:.2e}"
    )


def test_criterion_06_restricted_source_moves_closer():
    rng = np.random.default_rng(606)
    for n in (2, 4, 6, 8):
        P = rng.normal(size=(n, 2))
        Q = rng.normal(size=(n, 2))
        assert wasserstein1_exact(P, Q) == pytest.approx(w1_factorial(P, Q), abs=1e-12)

    worst = 1.0
    for c_mu in (0.5, 1.0):
        report = run_prop1(
            Prop1Config(
                c_mu=c_mu,
                n_s_grid=(2000,),
                k_grid=(1, 3, 5),
                n_target=200,
                w1_points=200,
                seeds=tuple(range(50)),
            )
        )
        for agg in report.aggregates:
            assert agg["omega_closer_frac"] >= 0.9, f"c_mu={c_mu} k={agg['k']}"
            worst = min(worst, agg["omega_closer_frac"])
    print(f"criterion 6 PASS: solver exact to n=8; min omega-closer fraction {worst:.2f}")


@pytest.fixture(scope="module")
def successive30():
    """30-seed successive runs shared by the gain and forgetting criteria."""
    methods = {
        "adanpc": BaselineSpec(kind="adanpc", k=10),
        "frozen_linear": BaselineSpec(kind="frozen_linear"),
        "entropy_head": BaselineSpec(kind="entropy_head"),
    }
    traces = {name: [] for name in methods}
    for s in range(30):
        seq = make_rotated_sequence(
            n_domains=6,
            angle_step_deg=15.0,
            n_per_domain=200,
            n_classes=3,
            seed=1000 + s,
            n_heldout=300,
        )
        for name, spec in methods.items():
            traces[name].append(run_successive(seq, spec, seed=s))
    return traces


def test_criterion_07_successive_gain_over_frozen(successive30):
    ada = np.mean([tr.during_accuracy[-1] for tr in successive30["adanpc"]])
    frz = np.mean([tr.during_accuracy[-1] for tr in successive30["frozen_linear"]])
    assert ada - frz >= 0.10
    print(f"criterion 7 PASS: final-domain accuracy {ada:.3f} vs frozen {frz:.3f}")


def test_criterion_08_no_source_forgetting(successive30):
    # (a) every source entry stays in the bank, per seed, at the exact count
    for tr in successive30["adanpc"]:
        assert tr.source_entries_before == 200
        assert tr.source_entries_after == 200

    ada_change = np.mean(
        [abs(tr.source_accuracy[-1] - tr.pre_source_accuracy) for tr in successive30["adanpc"]]
    )
    ent_drop = np.mean(
        [tr.pre_source_accuracy - tr.source_accuracy[-1] for tr in successive30["entropy_head"]]
    )
    assert ada_change <= 0.02
    assert ent_drop > 0.02
    assert ent_drop > ada_change
    print(
        f"criterion 8 PASS: source entries intact; d0 shift {ada_change:.4f} "
        f"vs entropy-head drop {ent_drop:.4f}"
    )


def test_criterion_09_seeded_runs_are_byte_identical(tmp_path):
    import json

    train_cfg = tmp_path / "train.json"
    train_cfg.write_text(
        json.dumps(
            {
                "dims": [2, 16, 8],
                "seed": 3,
                "data": {
                    "n_domains": 2,
                    "angle_step_deg": 15.0,
                    "n_per_domain": 60,
                    "n_classes": 3,
                    "seed": 0,
                },
                "loss": {"k": 3, "iterations": 6, "bank_capacity": 120, "batch_size": 8},
            }
        )
    )
    seq_cfg = tmp_path / "seq.json"
    seq_cfg.write_text(
        json.dumps(
            {
                "n_domains": 3,
                "angle_step_deg": 15.0,
                "n_per_domain": 40,
                "n_classes": 3,
                "seed": 0,
                "n_heldout": 60,
            }
        )
    )
    grid = tmp_path / "grid.json"
    grid.write_text(json.dumps({"n_s_grid": [100, 400], "shift_kinds": ["covariate"], "n_test": 300}))

    rng = np.random.default_rng(0)
    centers = rng.normal(size=(3, 6))
    bank = MemoryBank(dim=6, num_classes=3)
    for c in range(3):
        bank.insert_batch(
            centers[c] + 0.25 * rng.normal(size=(12, 6)), [c] * 12, [Source(0)] * 12
        )
    bank_path = tmp_path / "bank.pack"
    snapshot_save(bank, bank_path)
    y = rng.integers(0, 3, 20)
    np.savez(tmp_path / "stream.npz", x=centers[y] + 0.25 * rng.normal(size=(20, 6)), y=y)

    def run_twice(kind, argv_fn):
        blobs = []
        for tag in ("a", "b"):
            report = tmp_path / f"{kind}-{tag}.csv"
            assert cli_main(argv_fn(report)) == 0
            blobs.append(report.read_bytes())
        assert blobs[0] == blobs[1], f"{kind} reports differ between identical runs"

    run_twice(
        "train",
        lambda r: ["train", "--config", str(train_cfg), "--out", str(r) + ".npz", "--report", str(r)],
    )
    # adapt mutates its bank, so each run gets a fresh copy of the same pack
    def adapt_args(report):
        fresh = tmp_path / f"bank-{report.stem}.pack"
        fresh.write_bytes(bank_path.read_bytes())
        return [
            "adapt", "--bank", str(fresh), "--stream", str(tmp_path / "stream.npz"),
            "--k", "5", "--report", str(report),
        ]

    run_twice("adapt", adapt_args)
    run_twice(
        "theory",
        lambda r: ["theory", "prop2", "--grid", str(grid), "--seeds", "0-2", "--report", str(r)],
    )
    run_twice(
        "successive",
        lambda r: [
            "successive", "--sequence", str(seq_cfg), "--method", "adanpc",
            "--seeds", "0,1", "--report", str(r),
        ],
    )
    print("criterion 9 PASS: train/adapt/theory/successive reports byte-identical on re-run")


def test_criterion_10_snapshot_roundtrip_and_corruption(tmp_path):
    rng = np.random.default_rng(10)
    bank = MemoryBank(dim=7, num_classes=4)
    feats = rng.normal(size=(60, 7))
    labels = rng.integers(0, 4, 60)
    provs = [
        Source(0) if i % 3 else Target(float(rng.uniform(0.5, 1.0))) for i in range(60)
    ]
    bank.insert_batch(feats, labels, provs)
    path = tmp_path / "bank.pack"
    snapshot_save(bank, path)
    loaded = snapshot_load(path)
    assert np.array_equal(loaded.features, bank.features)
    assert np.array_equal(loaded.ids, bank.ids)
    assert np.array_equal(loaded.labels, bank.labels)
    for i in bank.ids:
        assert loaded.entry(int(i)).provenance == bank.entry(int(i)).provenance
    path2 = tmp_path / "again.pack"
    snapshot_save(loaded, path2)
    assert path.read_bytes() == path2.read_bytes()

    blob = bytearray(path.read_bytes())
    blob[len(blob) // 2] ^= 0xFF
    bad = tmp_path / "corrupt.pack"
    bad.write_bytes(bytes(blob))
    with pytest.raises((ChecksumMismatch, FormatVersionMismatch, ValueError)):
        snapshot_load(bad)
    with pytest.raises(Exception):
        truncated = tmp_path / "short.pack"
        truncated.write_bytes(path.read_bytes()[:40])
        snapshot_load(truncated)
    # the originals stay readable: rejection has no side effects
    assert len(snapshot_load(path)) == 60
    print("criterion 10 PASS: bit-exact round-trip; corrupted and truncated packs rejected")


def test_criterion_11_query_latency_budget():
    report = bench_inference((100_000,), d=128, k=10, probe_divisor=16)
    rows = {r.variant: r for r in report.rows}
    exact_ms = rows["exact"].p50_us / 1000.0
    ivf_ms = rows["ivf"].p50_us / 1000.0
    assert exact_ms < 50.0
    assert ivf_ms < 5.0
    assert rows["ivf"].recall_at_k >= 0.85
    print(
        f"criterion 11 PASS: exact p50 {exact_ms:.2f}ms, ivf p50 {ivf_ms:.2f}ms, "
        f"recall {rows['ivf'].recall_at_k:.3f}"
    )
