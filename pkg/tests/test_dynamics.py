import numpy as np
import pytest

from fann.losses import (
    DYNAMICS_DEFAULTS,
    TRAJECTORY_HEADER,
    simulate_triplet_dynamics,
    write_trajectory_csv,
)

MARGIN = DYNAMICS_DEFAULTS["margin"]


def _gap_and_active(row):
    d12, d13, d23, u, v = row[7], row[8], row[9], row[10], row[11]
    return abs(d13 - d23), MARGIN + d12 - (u * d13 + v * d23) > 0


def _worst_gap_increase(rows):
    """Largest per-step increase of |d13 - d23| after the hinge first fires."""
    worst = -np.inf
    seen_active = False
    prev = None
    for row in rows:
        gap, active = _gap_and_active(row)
        if prev is not None and seen_active:
            worst = max(worst, gap - prev)
        seen_active = seen_active or active
        prev = gap
    return worst


def _default_rows(kind, steps=None):
    d = DYNAMICS_DEFAULTS
    return simulate_triplet_dynamics(
        d["init"], kind, d["steps"] if steps is None else steps, d["step_size"]
    )


def test_zero_steps_only_initial_row():
    rows = _default_rows("symmetric", steps=0)
    assert len(rows) == 1
    assert rows[0][0] == 0


def test_row_count_and_step_column():
    rows = _default_rows("symmetric", steps=25)
    assert len(rows) == 26
    assert [r[0] for r in rows] == list(range(26))


def test_asymmetric_weights_fixed():
    rows = _default_rows("asymmetric", steps=40)
    assert all(r[10] == 1.0 and r[11] == 0.0 for r in rows)


def test_symmetric_gap_non_increasing_once_active():
    rows = _default_rows("symmetric")
    # hinge must actually fire for the default init
    assert any(_gap_and_active(r)[1] for r in rows)
    assert _worst_gap_increase(rows) <= 1e-9


def test_symmetric_gap_shrinks_substantially():
    rows = _default_rows("symmetric")
    first, _ = _gap_and_active(rows[0])
    last, _ = _gap_and_active(rows[-1])
    assert last < 0.5 * first


def test_asymmetric_violates_equalization_somewhere():
    rng = np.random.default_rng(0)
    found = False
    for _ in range(100):
        init = rng.normal(0.0, 1.0, (3, 2))
        rows = simulate_triplet_dynamics(
            init, "asymmetric", 100, DYNAMICS_DEFAULTS["step_size"]
        )
        if _worst_gap_increase(rows) > 1e-9:
            found = True
            break
    assert found


def test_inactive_start_freezes_everything():
    # anchor == positive, negative far away: hinge inactive, nothing moves
    init = ((0.0, 0.0), (0.0, 0.0), (5.0, 0.0))
    rows = simulate_triplet_dynamics(init, "symmetric", 10, 0.01)
    assert all(r[1:7] == rows[0][1:7] for r in rows)


def test_rejects_bad_arguments():
    with pytest.raises(ValueError):
        simulate_triplet_dynamics(DYNAMICS_DEFAULTS["init"], "quadratic", 5, 0.01)
    with pytest.raises(ValueError):
        simulate_triplet_dynamics(DYNAMICS_DEFAULTS["init"], "symmetric", -1, 0.01)
    with pytest.raises(ValueError):
        simulate_triplet_dynamics(((0, 0), (1, 1)), "symmetric", 5, 0.01)


def test_trajectory_csv_layout(tmp_path):
    rows = _default_rows("symmetric", steps=3)
    path = tmp_path / "traj.csv"
    write_trajectory_csv(rows, path)
    lines = path.read_text().splitlines()
    assert lines[0] == TRAJECTORY_HEADER
    assert len(lines) == 5
    first = lines[1].split(",")
    assert len(first) == 12
    assert first[0] == "0"
    # values must round-trip exactly
    assert float(first[10]) == rows[0][10]
