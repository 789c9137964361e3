"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v`` (add ``-s`` to see the
per-criterion lines on success too).
"""

import time

import numpy as np

from desk_run import (
    DATA_SEED,
    DESK_DECAY_INTERVAL,
    DESK_LR,
    NET_SEED,
    train_desk,
    top1_map,
)
from fann import dataio
from fann.dataio import generate_synthetic_dataset, load_samples
from fann.evaluator import cmc, distance_matrix, mean_average_precision
from fann.gradcheck import LAYER_TOL, NET_TOL, run_suite
from fann.losses import DYNAMICS_DEFAULTS, simulate_triplet_dynamics
from fann.network import build_network, desk_config, paper_config, propagate_shapes
from fann.trainer import TrainConfig, TrainState, sample_triplets, train, train_step


def _report(criterion: str, ok: bool, detail: str) -> None:
    print(f"[acceptance] {criterion}: {'PASS' if ok else 'FAIL'} ({detail})")


# -- 1. gradient fidelity ---------------------------------------------------------


def test_criterion_1_gradient_fidelity():
    start = time.time()
    worst_layer = 0.0
    worst_net = 0.0
    for seed in range(20):
        for result in run_suite(desk_config(), seed):
            if result.name.startswith("net/"):
                worst_net = max(worst_net, result.max_rel_err)
            else:
                worst_layer = max(worst_layer, result.max_rel_err)
    elapsed = time.time() - start
    ok = worst_layer < LAYER_TOL and worst_net < NET_TOL and elapsed < 120.0
    _report(
        "criterion 1 gradient fidelity",
        ok,
        f"layer/loss {worst_layer:.2e} < {LAYER_TOL}, net {worst_net:.2e} < {NET_TOL}, {elapsed:.0f}s < 120s",
    )
    assert worst_layer < LAYER_TOL
    assert worst_net < NET_TOL
    assert elapsed < 120.0


# -- 2. weight dynamics -----------------------------------------------------------


def _gap_active(row, margin=DYNAMICS_DEFAULTS["margin"]):
    d12, d13, d23, u, v = row[7], row[8], row[9], row[10], row[11]
    return abs(d13 - d23), margin + d12 - (u * d13 + v * d23) > 0


def _worst_gap_increase(rows):
    worst = -np.inf
    seen = False
    prev = None
    for row in rows:
        gap, active = _gap_active(row)
        if prev is not None and seen:
            worst = max(worst, gap - prev)
        seen = seen or active
        prev = gap
    return worst


def test_criterion_2_weight_dynamics(tmp_path):
    # u + v stays exactly 1 for every triplet over a real training run
    manifest = generate_synthetic_dataset(4, 2, 2, 37, 13, seed=5, out_dir=tmp_path)
    samples = load_samples(manifest)
    cfg = desk_config(seed=1)
    net = build_network(cfg)
    tcfg = TrainConfig(batch_size=4, lr=1e-3)
    state = TrainState(lr=tcfg.lr, rng=np.random.default_rng(1))
    for _ in range(50):
        batch = sample_triplets(samples, tcfg.batch_size, state.rng)
        train_step(net, samples, batch, state, tcfg)
    uv_exact = bool(state.weight_states) and all(
        ws.u + ws.v == 1.0 for ws in state.weight_states.values()
    )

    # textual mode equalizes on the stock simulation
    d = DYNAMICS_DEFAULTS
    rows = simulate_triplet_dynamics(d["init"], "symmetric", d["steps"], d["step_size"])
    sym_fired = any(_gap_active(r)[1] for r in rows)
    sym_worst = _worst_gap_increase(rows)
    sym_ok = sym_fired and sym_worst <= 1e-9

    # the fixed asymmetric weighting does not: counterexample within 100 inits
    rng = np.random.default_rng(0)
    asym_violation = False
    for _ in range(100):
        init = rng.normal(0.0, 1.0, (3, 2))
        rows = simulate_triplet_dynamics(init, "asymmetric", 100, d["step_size"])
        if _worst_gap_increase(rows) > 1e-9:
            asym_violation = True
            break

    ok = uv_exact and sym_ok and asym_violation
    _report(
        "criterion 2 weight dynamics",
        ok,
        f"u+v exact over {len(state.weight_states)} triplets, symmetric worst step {sym_worst:.1e} <= 1e-9, "
        f"asymmetric counterexample {'found' if asym_violation else 'missing'}",
    )
    assert uv_exact
    assert sym_ok
    assert asym_violation


# -- 3. shape fidelity -------------------------------------------------------------


def test_criterion_3_shape_fidelity():
    report = propagate_shapes(paper_config())
    checks = {
        "encoder tap": report.tap_shape == (64, 36, 11),
        "decoder output": report.reconstruction_shape == (3, 229, 79),
        "part slices": report.slice_shapes == ((64, 9, 11),) * 4,
        "embedding": report.embedding_dim == 1200,
    }
    # building performs the same verification with real parameters attached
    net = build_network(paper_config())
    checks["build"] = net.shapes == report
    ok = all(checks.values())
    _report("criterion 3 shape fidelity", ok, ", ".join(k for k, v in checks.items() if v))
    assert all(checks.values()), checks


# -- 4. evaluation oracle equivalence ----------------------------------------------


def _brute_cmc(dist, probe_ids, gallery_ids, max_rank):
    n = len(probe_ids)
    curve = np.zeros(max_rank)
    for i in range(n):
        order = sorted(range(len(gallery_ids)), key=lambda j: (dist[i, j], j))
        rank = next(
            (pos for pos, j in enumerate(order, start=1) if gallery_ids[j] == probe_ids[i]),
            None,
        )
        for r in range(max_rank):
            if rank is not None and rank <= r + 1:
                curve[r] += 1
    return curve / n


def _brute_map(dist, probe_ids, gallery_ids):
    aps = []
    for i in range(len(probe_ids)):
        order = sorted(range(len(gallery_ids)), key=lambda j: (dist[i, j], j))
        hits, precisions = 0, []
        for pos, j in enumerate(order, start=1):
            if gallery_ids[j] == probe_ids[i]:
                hits += 1
                precisions.append(hits / pos)
        aps.append(sum(precisions) / len(precisions))
    return float(np.mean(aps))


def test_criterion_4_evaluation_oracles():
    rng = np.random.default_rng(99)
    worst_cmc = 0.0
    worst_map = 0.0
    monotone = True
    rank_equivalent = True
    for _ in range(100):
        n_ids = int(rng.integers(2, 8))
        n_probe = int(rng.integers(2, 21))
        n_gal = int(rng.integers(n_ids, 81))
        probes = rng.normal(size=(n_probe, 12))
        probes /= np.linalg.norm(probes, axis=1, keepdims=True)
        gallery = rng.normal(size=(n_gal, 12))
        gallery /= np.linalg.norm(gallery, axis=1, keepdims=True)
        probe_ids = rng.integers(0, n_ids, n_probe)
        gallery_ids = np.concatenate([np.arange(n_ids), rng.integers(0, n_ids, n_gal - n_ids)])
        dist = distance_matrix(probes, gallery)
        curve = cmc(dist, probe_ids, gallery_ids, 10)
        worst_cmc = max(worst_cmc, float(np.max(np.abs(curve - _brute_cmc(dist, probe_ids, gallery_ids, 10)))))
        worst_map = max(
            worst_map,
            abs(mean_average_precision(dist, probe_ids, gallery_ids) - _brute_map(dist, probe_ids, gallery_ids)),
        )
        monotone = monotone and bool(np.all(np.diff(curve) >= 0))
        cos = probes @ gallery.T
        for i in range(n_probe):
            if not np.array_equal(np.argsort(dist[i], kind="stable"), np.argsort(-cos[i], kind="stable")):
                rank_equivalent = False
    ok = worst_cmc <= 1e-12 and worst_map <= 1e-12 and monotone and rank_equivalent
    _report(
        "criterion 4 evaluation oracles",
        ok,
        f"cmc dev {worst_cmc:.1e}, map dev {worst_map:.1e}, monotone {monotone}, cosine ranks {rank_equivalent}",
    )
    assert worst_cmc <= 1e-12
    assert worst_map <= 1e-12
    assert monotone
    assert rank_equivalent


# -- 5. end-to-end synthetic experiment ---------------------------------------------


def test_criterion_5_end_to_end(tmp_path):
    start = time.time()
    manifest = generate_synthetic_dataset(20, 4, 2, 37, 13, seed=DATA_SEED, out_dir=tmp_path / "clean")
    samples = load_samples(manifest)
    net, _ = train_desk(samples, NET_SEED, zeta=0.02)
    top1, map_ = top1_map(net, samples, trials=10)

    heavy = generate_synthetic_dataset(
        20, 4, 2, 37, 13, seed=DATA_SEED, out_dir=tmp_path / "heavy", clutter="heavy"
    )
    heavy_samples = load_samples(heavy)
    with_mask = []
    without_mask = []
    for seed in (NET_SEED, NET_SEED + 1, NET_SEED + 2):
        net_m, _ = train_desk(heavy_samples, seed, zeta=0.02)
        with_mask.append(top1_map(net_m, heavy_samples)[0])
        net_0, _ = train_desk(heavy_samples, seed, zeta=0.0)
        without_mask.append(top1_map(net_0, heavy_samples)[0])
    elapsed = time.time() - start

    mask_mean = float(np.mean(with_mask))
    plain_mean = float(np.mean(without_mask))
    ok = top1 >= 0.90 and map_ >= 0.80 and mask_mean > plain_mean and elapsed < 600.0
    _report(
        "criterion 5 end-to-end",
        ok,
        f"clean top1 {top1:.3f} >= 0.90, mAP {map_:.3f} >= 0.80; heavy clutter mask-supervised "
        f"{mask_mean:.3f} > unsupervised {plain_mean:.3f}; {elapsed:.0f}s < 600s",
    )
    assert top1 >= 0.90
    assert map_ >= 0.80
    assert mask_mean > plain_mean
    assert elapsed < 600.0


# -- 6. reproducibility --------------------------------------------------------------


def test_criterion_6_reproducibility(tmp_path):
    manifest = generate_synthetic_dataset(6, 2, 2, 37, 13, seed=21, out_dir=tmp_path / "data")

    def run(out):
        net = build_network(desk_config(seed=13))
        tcfg = TrainConfig(
            batch_size=4, lr=DESK_LR, lr_decay_interval=DESK_DECAY_INTERVAL,
            log_interval=10, checkpoint_interval=25,
        )
        train(net, manifest, tcfg, 50, out_dir=out)

    run(tmp_path / "a")
    run(tmp_path / "b")
    rel_a = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    rel_b = sorted(p.relative_to(tmp_path / "b") for p in (tmp_path / "b").rglob("*") if p.is_file())
    identical = rel_a == rel_b and all(
        (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes() for rel in rel_a
    )
    _report(
        "criterion 6 reproducibility",
        identical,
        f"{len(rel_a)} files bit-identical across reruns (checkpoints, state, metrics)",
    )
    assert identical


# -- 7. format round trips ------------------------------------------------------------


def test_criterion_7_format_round_trips(tmp_path):
    rng = np.random.default_rng(3)
    checks = {}

    t = rng.normal(size=(3, 4, 2))
    dataio.write_fant(tmp_path / "t.fant", t)
    checks["fant round trip"] = np.array_equal(dataio.read_fant(tmp_path / "t.fant"), t)

    img = np.round(rng.uniform(size=(3, 6, 5)) * 255) / 255.0
    dataio.write_image_ppm(tmp_path / "i.ppm", img)
    back = dataio.read_image_ppm(tmp_path / "i.ppm")
    dataio.write_image_ppm(tmp_path / "i2.ppm", back)
    checks["ppm round trip"] = np.array_equal(back, img) and (
        (tmp_path / "i.ppm").read_bytes() == (tmp_path / "i2.ppm").read_bytes()
    )

    mask = (rng.uniform(size=(1, 6, 5)) > 0.5).astype(float)
    dataio.write_mask_pgm(tmp_path / "m.pgm", mask)
    back_m = dataio.read_mask_pgm(tmp_path / "m.pgm")
    dataio.write_mask_pgm(tmp_path / "m2.pgm", back_m)
    checks["pgm round trip"] = np.array_equal(back_m, mask) and (
        (tmp_path / "m.pgm").read_bytes() == (tmp_path / "m2.pgm").read_bytes()
    )

    rejections = 0
    for payload, reader in (
        (b"P5\n1 1\n255\n\x00", dataio.read_image_ppm),   # wrong magic
        (b"P6\n2 2\n255\n\x00\x00", dataio.read_image_ppm),  # truncated
        (b"P6\n1 1\n16\n\x00\x00\x00", dataio.read_image_ppm),  # bad maxval
    ):
        path = tmp_path / "bad.bin"
        path.write_bytes(payload)
        try:
            reader(path)
        except ValueError:
            rejections += 1
    bad_fant = tmp_path / "bad.fant"
    bad_fant.write_bytes(b"XXXX" + bytes(20))
    try:
        dataio.read_fant(bad_fant)
    except ValueError:
        rejections += 1
    checks["malformed rejected"] = rejections == 4

    ok = all(checks.values())
    _report("criterion 7 format round trips", ok, ", ".join(k for k, v in checks.items() if v))
    assert all(checks.values()), checks
