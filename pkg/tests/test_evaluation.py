import math

import numpy as np
import pytest

from graphmdn.data import Dataset, DatasetManifest, Normalization, SampleRecord
from graphmdn.errors import DegenerateAlignmentError, JoinError, ShapeError
from graphmdn.evaluation import (
    HypothesisSet,
    evaluate,
    mpjpe,
    p_mpjpe,
    procrustes_align,
    procrustes_fit,
    select_highest,
    select_mean,
    select_oracle,
    svd3,
)
from graphmdn.mdn import PoseMixture


def _rot(axis, deg):
    a = math.radians(deg)
    c, s = math.cos(a), math.sin(a)
    if axis == "z":
        return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])
    return np.array([[1, 0, 0], [0, c, -s], [0, s, c]])


def random_rotation(rng):
    q = rng.normal(size=4)
    w, x, y, z = q / np.linalg.norm(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def test_highest_argmax():
    mu = np.arange(9.0).reshape(3, 3)
    assert np.array_equal(select_highest(HypothesisSet(mu, np.array([0.2, 0.5, 0.3]))), mu[1])


def test_highest_single_kernel():
    mu = np.ones((1, 6))
    assert np.array_equal(select_highest(HypothesisSet(mu, np.array([1.0]))), mu[0])


def test_highest_tie_takes_first():
    mu = np.array([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]])
    assert np.array_equal(select_highest(HypothesisSet(mu, np.array([0.5, 0.5]))), mu[0])


def test_mean_identical_kernels():
    mu = np.tile(np.array([0.3, -0.1, 0.7]), (4, 1))
    np.testing.assert_allclose(select_mean(HypothesisSet(mu, np.full(4, 0.25))), mu[0], rtol=1e-15)


def test_mean_symmetric_pair_cancels(rng):
    v = rng.normal(size=6)
    np.testing.assert_array_equal(select_mean(HypothesisSet(np.stack([v, -v]), np.array([0.5, 0.5]))), 0.0)


def test_mean_weighted_scalar():
    out = select_mean(HypothesisSet(np.array([[0.0], [4.0]]), np.array([0.75, 0.25])))
    assert out[0] == 1.0


def test_oracle_exact_match(rng):
    mu = rng.normal(size=(4, 6))
    h = HypothesisSet(mu, np.full(4, 0.25))
    out = select_oracle(h, mu[2])
    assert np.array_equal(out, mu[2]) and mpjpe(out, mu[2]) == 0.0


def test_oracle_picks_smaller_error():
    gt = np.zeros(3)
    mu = np.array([[7.0, 0, 0], [0, 2.0, 0]])
    assert np.array_equal(select_oracle(HypothesisSet(mu, np.array([0.9, 0.1])), gt), mu[1])


def test_oracle_never_worse(rng):
    for _ in range(1000):
        m = int(rng.integers(1, 6))
        h = HypothesisSet(rng.normal(size=(m, 48)), rng.dirichlet(np.ones(m)))
        gt = rng.normal(size=48)
        o = mpjpe(select_oracle(h, gt), gt)
        assert o <= mpjpe(select_highest(h), gt)
        assert o <= min(mpjpe(mu, gt) for mu in h.mu)


def test_mpjpe_zero(rng):
    p = rng.normal(size=48)
    assert mpjpe(p, p) == 0.0


def test_mpjpe_345(rng):
    gt = rng.normal(size=(16, 3))
    assert mpjpe(gt + np.array([3.0, 4.0, 0.0]), gt) == pytest.approx(5.0, rel=1e-14)


def test_mpjpe_one_joint_off():
    gt = np.zeros((16, 3))
    pred = gt.copy()
    pred[7, 2] = 16.0
    assert mpjpe(pred, gt) == 1.0


def test_mpjpe_shape_mismatch():
    with pytest.raises(ShapeError):
        mpjpe(np.zeros(48), np.zeros(45))


def test_svd3_matches_numpy(rng):
    for _ in range(200):
        a = rng.normal(size=(3, 3))
        u, s, vt = svd3(a)
        np.testing.assert_allclose(s, np.linalg.svd(a, compute_uv=False), rtol=1e-12)
        np.testing.assert_allclose(u @ np.diag(s) @ vt, a, atol=1e-12)
        np.testing.assert_allclose(u.T @ u, np.eye(3), atol=1e-12)
        np.testing.assert_allclose(vt @ vt.T, np.eye(3), atol=1e-12)


def test_svd3_rank_deficient():
    a = np.outer([1.0, 2.0, 3.0], [0.5, -1.0, 2.0])
    u, s, vt = svd3(a)
    np.testing.assert_allclose(u @ np.diag(s) @ vt, a, atol=1e-12)
    np.testing.assert_allclose(u.T @ u, np.eye(3), atol=1e-12)


def test_procrustes_rotation_translation(rng):
    gt = rng.normal(size=(16, 3))
    pred = gt @ _rot("z", 90).T + np.array([5.0, -2.0, 1.0])
    assert mpjpe(procrustes_align(pred, gt), gt) < 1e-12


def test_procrustes_scale():
    gt = np.random.default_rng(1).normal(size=(16, 3))
    fit = procrustes_fit(2 * gt, gt)
    assert fit.scale == pytest.approx(0.5, rel=1e-13)
    assert mpjpe(fit.apply(2 * gt), gt) < 1e-12


def test_procrustes_random_similarity(rng):
    for _ in range(200):
        gt = rng.normal(size=(16, 3))
        r, s, t = random_rotation(rng), rng.uniform(0.2, 5), rng.normal(size=3) * 10
        pred = s * gt @ r.T + t
        assert mpjpe(procrustes_align(pred, gt), gt) < 1e-9


def test_procrustes_never_reflects(rng):
    gt = rng.normal(size=(16, 3))
    mirrored = gt * np.array([1, 1, -1])
    fit = procrustes_fit(mirrored, gt)
    assert np.linalg.det(fit.rotation) == pytest.approx(1.0, abs=1e-12)


def test_rigid_mode_keeps_scale(rng):
    gt = rng.normal(size=(16, 3))
    assert procrustes_fit(3 * gt, gt, scale=False).scale == 1.0


def test_collinear_rejected():
    line = np.outer(np.arange(16.0), [1.0, 2.0, 3.0])
    with pytest.raises(DegenerateAlignmentError):
        procrustes_fit(line, np.random.default_rng(0).normal(size=(16, 3)))


def test_p_mpjpe_rigid_transform_zero(rng):
    gt = rng.normal(size=(16, 3))
    assert p_mpjpe(gt @ _rot("x", 33).T + 4.0, gt) < 1e-12


def test_p_mpjpe_identity(rng):
    gt = rng.normal(size=48)
    assert p_mpjpe(gt, gt) < 1e-12


def test_p_mpjpe_not_above_mpjpe(rng):
    for _ in range(1000):
        gt, pred = rng.normal(size=(16, 3)), rng.normal(size=(16, 3))
        assert p_mpjpe(pred, gt) <= mpjpe(pred, gt) + 1e-9


# -- reports -----------------------------------------------------------------


def _dataset(targets, actions):
    recs = [SampleRecord(f"s{i}", np.zeros(32), t, "S9", a) for i, (t, a) in enumerate(zip(targets, actions))]
    man = DatasetManifest("h", len(recs), 16, Normalization(scale_3d=1.0), {"test": ["S9"]})
    return Dataset(recs, man)


def _single(mu):
    mu = np.atleast_2d(mu)
    return PoseMixture(mu, np.ones(len(mu)), np.full(len(mu), 1 / len(mu)))


def test_report_identical_is_zero(rng):
    targets = [rng.uniform(-1, 1, 48) for _ in range(3)]
    ds = _dataset(targets, ["Walking"] * 3)
    rep = evaluate({r.id: _single(r.target3d) for r in ds.records}, ds)
    for row in rep.table.values():
        assert all(v < 1e-12 for v in row.values())
    assert set(rep.table) == {(s, p) for s in ("highest", "mean", "oracle") for p in ("MPJPE", "P-MPJPE")}


def test_report_action_weighting():
    t = np.random.default_rng(2).uniform(-0.5, 0.5, (4, 48))
    ds = _dataset(list(t), ["A", "A", "B", "B"])
    shift = lambda d: np.tile([d, 0.0, 0.0], 16)  # noqa: E731
    preds = {"s0": _single(t[0] + shift(10)), "s1": _single(t[1] + shift(10)), "s2": _single(t[2] + shift(20)), "s3": _single(t[3] + shift(20))}
    rep = evaluate(preds, ds)
    assert rep.value("highest", "MPJPE", "A") == pytest.approx(10.0, rel=1e-12)
    assert rep.value("highest", "MPJPE", "B") == pytest.approx(20.0, rel=1e-12)
    assert rep.value("highest", "MPJPE") == pytest.approx(15.0, rel=1e-12)


def test_report_oracle_column_smallest(rng):
    targets = [rng.uniform(-1, 1, 48) for _ in range(30)]
    actions = [["Walking", "Eating", "Sitting"][i % 3] for i in range(30)]
    ds = _dataset(targets, actions)
    preds = {r.id: PoseMixture(rng.uniform(-1, 1, (4, 48)), np.ones(4), rng.dirichlet(np.ones(4))) for r in ds.records}
    rep = evaluate(preds, ds)
    for a in rep.actions + ["Avg"]:
        o = rep.value("oracle", "MPJPE", a)
        assert o <= rep.value("highest", "MPJPE", a)
        assert rep.value("oracle", "P-MPJPE", a) <= rep.value("oracle", "MPJPE", a) + 1e-9


def test_mean_can_beat_oracle():
    # Two kernels straddling the truth: their average is exact while each
    # kernel is off by one unit, so oracle <= mean does not hold in general.
    gt = np.zeros(48)
    mu = np.stack([np.tile([1.0, 0, 0], 16), np.tile([-1.0, 0, 0], 16)])
    h = HypothesisSet(mu, np.array([0.5, 0.5]))
    assert mpjpe(select_mean(h), gt) == 0.0 < mpjpe(select_oracle(h, gt), gt)


def test_report_is_order_independent(rng):
    targets = [rng.uniform(-1, 1, 48) for _ in range(10)]
    ds = _dataset(targets, ["X"] * 10)
    preds = {r.id: _single(rng.uniform(-1, 1, 48)) for r in ds.records}
    shuffled = dict(reversed(list(preds.items())))
    assert evaluate(preds, ds).to_csv() == evaluate(shuffled, ds).to_csv()


def test_report_scales_to_millimetres(rng):
    t = rng.uniform(-0.5, 0.5, 48)
    ds = _dataset([t], ["X"])
    rep = evaluate({"s0": _single(t + np.tile([0.01, 0, 0], 16))}, ds, scale_3d=1000.0)
    assert rep.value("highest", "MPJPE") == pytest.approx(10.0, rel=1e-10)


def test_missing_ground_truth_named(rng):
    ds = _dataset([np.zeros(48)], ["X"])
    with pytest.raises(JoinError) as exc:
        evaluate({"s0": _single(np.zeros(48)), "ghost-7": _single(np.zeros(48))}, ds)
    assert "ghost-7" in str(exc.value)


def test_report_files(tmp_path, rng):
    ds = _dataset([rng.uniform(-1, 1, 48)], ["Walking"])
    rep = evaluate({"s0": _single(rng.uniform(-1, 1, 48))}, ds)
    rep.write(tmp_path / "r")
    csv_text = (tmp_path / "r.csv").read_text()
    assert csv_text.splitlines()[0] == "strategy,protocol,Walking,Avg"
    assert (tmp_path / "r.json").exists()
