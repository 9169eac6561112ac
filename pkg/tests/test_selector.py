import math

import numpy as np
import pytest

from stepreuse.analysis import analyze_pair, selector_stats
from stepreuse.diffusion import Trajectory
from stepreuse.motion import MotionNets
from stepreuse.selector import (DssSample, SelectorNet, default_beta,
                                default_candidates, error_curve, gt_switch_step,
                                label_index, mask_stats, predict_switch,
                                train_dss)


def test_default_candidates_grid():
    cands = default_candidates(100, step=5)
    assert cands[0] == 5 and cands[-1] == 100 and len(cands) == 20
    assert np.all(np.diff(cands) == 5)


def test_default_beta_satisfies_precondition():
    cands = default_candidates(100)
    beta = default_beta(cands)
    assert beta * cands[0] > 1.0
    assert np.isclose(beta * cands[0], 2.0 * math.e)


def test_gt_switch_constant_curve_picks_smallest():
    cands = np.arange(10, 101, 10)
    e = np.full(10, 3.0)
    assert gt_switch_step(e, cands, beta=1.0) == 10


def test_gt_switch_one_over_t_picks_largest():
    cands = np.arange(10, 101, 10)
    e = 1.0 / cands
    assert gt_switch_step(e, cands, beta=1.0) == 100


def test_gt_switch_interior_minimum():
    cands = np.arange(10, 101, 10)
    e = np.full(10, 5.0)
    e[4] = 0.01  # t = 50
    assert gt_switch_step(e, cands, beta=1.0) == 50


def test_gt_switch_matches_brute_force_oracle():
    cands = default_candidates(100)
    beta = default_beta(cands)
    for seed in range(1000):
        rng = np.random.default_rng(seed)
        e = rng.uniform(0.0, 2.0, size=len(cands))
        got = gt_switch_step(e, cands, beta)
        best_t, best_w = None, None
        for t, et in zip(cands, e):
            w = math.log(beta * t) * et
            if best_w is None or w < best_w:
                best_w, best_t = w, int(t)
        assert got == best_t


def test_gt_switch_tie_breaks_to_smaller_step():
    cands = np.array([10, 20])
    e = np.array([0.0, 0.0])
    assert gt_switch_step(e, cands, beta=1.0) == 10
    # engineered exact tie of weighted values
    e2 = np.array([1.0, math.log(10.0) / math.log(20.0)])
    w = np.log(1.0 * cands) * e2
    assert w[0] == pytest.approx(w[1])
    assert gt_switch_step(e2, cands, beta=1.0) in (10,)


def test_gt_switch_weight_positivity_guard():
    cands = np.array([5, 10])
    with pytest.raises(ValueError, match="exceed 1"):
        gt_switch_step(np.ones(2), cands, beta=0.2)  # beta*min = 1.0


def test_gt_switch_validation():
    with pytest.raises(ValueError, match="increasing"):
        gt_switch_step(np.ones(2), np.array([10, 10]), beta=1.0)
    with pytest.raises(ValueError, match="finite"):
        gt_switch_step(np.array([np.nan, 1.0]), np.array([5, 10]), beta=1.0)
    with pytest.raises(ValueError, match="length"):
        gt_switch_step(np.ones(3), np.array([5, 10]), beta=1.0)


def test_beta_monotone_on_consistency_ordered_curves():
    """For error curves that do not increase along the denoising direction
    (e non-decreasing in the step index), raising beta never raises t*."""
    cands = default_candidates(100)
    for seed in range(200):
        rng = np.random.default_rng(seed)
        e = np.cumsum(rng.uniform(0.0, 0.5, size=len(cands))) + 0.1
        betas = sorted(rng.uniform(0.5, 20.0, size=3))
        stars = [gt_switch_step(e, cands, b) for b in betas]
        assert stars[0] >= stars[1] >= stars[2]


# -- masking ---------------------------------------------------------------------


def _fake_stats(length=12, total=13):
    steps = np.arange(length, 0, -1)
    return np.stack([steps / total, np.linspace(1, 0, length),
                     np.linspace(0.1, 0.9, length), np.ones(length)], axis=1)


def test_mask_zero_rate_is_identity():
    stats = _fake_stats()
    out = mask_stats(stats, 0.0, np.random.default_rng(0))
    assert np.array_equal(out, stats)


def test_mask_always_leaves_one_step():
    stats = _fake_stats(length=3)
    rng = np.random.default_rng(1)
    for _ in range(200):
        out = mask_stats(stats, 0.9, rng)
        assert out[:, 3].sum() >= 1.0


def test_mask_zeroes_hidden_rows_keeps_step_column():
    stats = _fake_stats()
    rng = np.random.default_rng(2)
    out = mask_stats(stats, 0.7, rng)
    hidden = out[:, 3] == 0.0
    assert hidden.any()
    assert np.array_equal(out[hidden, 1], np.zeros(hidden.sum()))
    assert np.array_equal(out[:, 0], stats[:, 0])


def test_mask_rate_validation():
    with pytest.raises(ValueError):
        mask_stats(_fake_stats(), 1.0, np.random.default_rng(0))


# -- selector net ------------------------------------------------------------------


def test_selector_outputs_distribution():
    net = SelectorNet(default_candidates(60, 10), hidden=8, seed=0)
    probs = net.probabilities(_fake_stats()).data
    assert probs.shape == (1, 6)
    assert abs(probs.sum() - 1.0) < 1e-9
    assert np.all(probs >= 0)


def test_predict_switch_in_candidate_set_and_deterministic():
    net = SelectorNet(default_candidates(60, 10), hidden=8, seed=1)
    stats = _fake_stats()
    a = predict_switch(net, stats)
    assert a in set(default_candidates(60, 10).tolist())
    assert predict_switch(net, stats) == a


def test_predict_switch_rejects_empty_and_all_masked():
    net = SelectorNet(default_candidates(60, 10), hidden=8, seed=2)
    with pytest.raises(ValueError, match="empty"):
        predict_switch(net, np.zeros((0, 4)))
    stats = _fake_stats()
    stats[:, 3] = 0.0
    with pytest.raises(ValueError, match="masked"):
        predict_switch(net, stats)


def test_uniform_prediction_cross_entropy_is_log_classes():
    # an untrained head with zeroed weights gives exactly uniform probabilities
    net = SelectorNet(default_candidates(100), hidden=8, seed=3)
    net.head.w.data[...] = 0.0
    net.head.b.data[...] = 0.0
    probs = net.probabilities(_fake_stats()).data[0]
    assert np.allclose(probs, 1.0 / 20)
    assert np.isclose(-np.log(probs[0]), np.log(20))


def _toy_samples(n, candidates, total=20, seed=0):
    """Stats whose error column dips at the labelled candidate."""
    rng = np.random.default_rng(seed)
    samples = []
    for _ in range(n):
        label = int(rng.integers(0, len(candidates)))
        steps = np.arange(total - 1, 0, -1)
        e = np.abs(steps - candidates[label]) / total + rng.normal(0, 0.02, total - 1)
        nmi_col = rng.uniform(0.4, 0.6, total - 1)
        stats = np.stack([steps / total, nmi_col, e, np.ones(total - 1)], axis=1)
        samples.append(DssSample(stats=stats, label=label,
                                 meta={"candidates": candidates.tolist()}))
    return samples


def test_train_dss_learns_above_chance_and_handles_mask_rates():
    candidates = default_candidates(20, 5)  # 4 classes
    samples = _toy_samples(120, candidates, seed=4)
    net, hist = train_dss(samples, mask_rate=0.5, epochs=25, seed=0, hidden=16)
    assert hist[-1]["holdout_acc_masked"] > 1.0 / len(candidates)
    # the masking contract holds at the extremes too
    train_dss(samples[:40], mask_rate=0.0, epochs=1, seed=0, hidden=8)
    train_dss(samples[:40], mask_rate=0.9, epochs=1, seed=0, hidden=8)


def test_train_dss_deterministic():
    candidates = default_candidates(20, 5)
    samples = _toy_samples(60, candidates, seed=5)
    net_a, _ = train_dss(samples, mask_rate=0.5, epochs=3, seed=9, hidden=8)
    net_b, _ = train_dss(samples, mask_rate=0.5, epochs=3, seed=9, hidden=8)
    for pa, pb in zip(net_a.parameters(), net_b.parameters()):
        assert np.array_equal(pa.data, pb.data)


def test_selector_checkpoint_round_trip(tmp_path):
    net = SelectorNet(default_candidates(40, 10), hidden=8, seed=6)
    net.save(tmp_path / "dss", mask_rate=0.5)
    back = SelectorNet.load(tmp_path / "dss")
    assert np.array_equal(back.candidates, net.candidates)
    for pa, pb in zip(back.parameters(), net.parameters()):
        assert np.array_equal(pa.data, pb.data)


def test_label_index():
    cands = default_candidates(40, 10)
    assert label_index(cands, 30) == 2
    with pytest.raises(ValueError, match="candidate"):
        label_index(cands, 33)


# -- pair analysis ------------------------------------------------------------------


def _synthetic_trajectories(total=10, n_channels=2, grid=3, seed=0, shift=False):
    """Hand-built trajectories whose residuals are known feature fields."""
    rng = np.random.default_rng(seed)
    traj_i = Trajectory(frame=0, T=total)
    traj_j = Trajectory(frame=1, T=total)
    zi = rng.standard_normal((n_channels, grid, grid))
    zj = rng.standard_normal((n_channels, grid, grid))
    traj_i.latents[total] = zi.copy()
    traj_j.latents[total] = zj.copy()
    for t in range(total, 0, -1):
        di = rng.standard_normal((n_channels, grid, grid))
        dj = np.roll(di, 1, axis=2) if shift else rng.standard_normal(di.shape)
        traj_i.residuals[t] = di
        traj_j.residuals[t] = dj
        zi = zi + di
        zj = zj + dj
        traj_i.latents[t - 1] = zi.copy()
        traj_j.latents[t - 1] = zj.copy()
    return traj_i, traj_j


def test_analysis_lengths_and_suffix_means():
    traj_i, traj_j = _synthetic_trajectories(total=8)
    analysis = analyze_pair(traj_i, traj_j, nets=None, source="residual",
                            candidates=[2, 5, 8], tau=0.07,
                            keep_means_at=[5, 8])
    assert analysis.nmi.shape == (7,)
    assert analysis.errors.shape == (8,)
    assert analysis.curve.shape == (3,)
    assert set(analysis.suffix_means) == {5, 8}
    # the suffix mean at the top step is the raw matrix of that step itself
    from stepreuse.analysis import step_matrix, suffix_mean
    top = step_matrix(traj_i, traj_j, 8, None, "residual")
    assert np.allclose(analysis.suffix_means[8], top)
    # and at t the mean of steps t..T (independent accumulation)
    acc = np.mean([step_matrix(traj_i, traj_j, t, None, "residual")
                   for t in range(5, 9)], axis=0)
    assert np.allclose(analysis.suffix_means[5], acc)
    assert np.allclose(suffix_mean(traj_i, traj_j, None, 5, "residual"), acc)


def test_selector_stats_layout():
    traj_i, traj_j = _synthetic_trajectories(total=6)
    analysis = analyze_pair(traj_i, traj_j, nets=None, source="residual", tau=0.07)
    stats = selector_stats(analysis)
    assert stats.shape == (5, 4)
    assert np.allclose(stats[:, 0] * 6, np.arange(5, 0, -1))
    assert np.all(stats[:, 3] == 1.0)
    assert stats[0, 1] == analysis.nmi_at(5)
    assert stats[0, 2] == analysis.error_at(5)


def test_error_curve_static_content_near_zero():
    # identical trajectories: matrices are self-correspondences, transport exact
    traj_i, _ = _synthetic_trajectories(total=8, seed=3)
    curve = error_curve(traj_i, traj_i, None, [4, 8], tau=1e-3, source="residual")
    assert curve.shape == (2,)
    assert np.all(curve >= 0.0)
    assert curve.max() < 0.15  # aggregate of self-cosine matrices stays near identity


def test_error_curve_matches_inline_analysis():
    traj_i, traj_j = _synthetic_trajectories(total=8, seed=4)
    analysis = analyze_pair(traj_i, traj_j, nets=None, source="residual",
                            candidates=[4, 8], tau=0.07)
    curve = error_curve(traj_i, traj_j, None, [4, 8], tau=0.07, source="residual")
    assert np.array_equal(curve, analysis.curve)


def test_consistency_profile_writes_reports(tmp_path):
    traj_i, traj_j = _synthetic_trajectories(total=8, seed=6)
    from stepreuse.analysis import consistency_profile

    analysis = consistency_profile(traj_i, traj_j, None, source="residual",
                                   tau=0.07, out_dir=tmp_path)
    lines = (tmp_path / "profile.csv").read_text().strip().splitlines()
    assert lines[0] == "t,nmi,e_t"
    assert len(lines) == 9
    assert lines[-1].split(",")[1] == ""       # no NMI row for the top step
    assert (tmp_path / "profile.png").exists()
    assert analysis.nmi.shape == (7,)


def test_static_pair_profile_transport_error_near_zero():
    # identical trajectories: the self-matrices transport residuals exactly,
    # so e_t stays near zero at every step
    traj_i, _ = _synthetic_trajectories(total=10, n_channels=6, grid=4, seed=7)
    analysis = analyze_pair(traj_i, traj_i, nets=None, source="residual",
                            tau=1e-3)
    assert analysis.errors.max() < 5e-2
    assert np.all((0.0 <= analysis.nmi) & (analysis.nmi <= 1.0))
    print(f"static-pair profile: max e_t {analysis.errors.max():.4f}, "
          f"mean NMI {analysis.nmi.mean():.3f}")


def test_masked_vs_full_prediction_agreement_reported():
    # robustness figure from the masking contract; reported, not asserted
    candidates = default_candidates(20, 5)
    samples = _toy_samples(80, candidates, seed=8)
    net, _ = train_dss(samples, mask_rate=0.5, epochs=20, seed=1, hidden=16)
    rng = np.random.default_rng(9)
    agree = 0
    for s in samples[:40]:
        full = predict_switch(net, s.stats)
        masked = predict_switch(net, mask_stats(s.stats, 0.5, rng))
        agree += full == masked
    print(f"full vs 50%-masked agreement: {agree}/40 ({agree / 40:.0%})")


def test_analysis_tap_source_uses_nets():
    total = 5
    taps_shapes = {"coarse": (4, 2, 2), "fine": (3, 4, 4)}
    nets = MotionNets(tap_shapes=taps_shapes, seed=0)
    rng = np.random.default_rng(5)
    tr_i = Trajectory(frame=0, T=total)
    tr_j = Trajectory(frame=1, T=total)
    z = rng.standard_normal((3, 4, 4))
    tr_i.latents[total] = z.copy()
    tr_j.latents[total] = z.copy()
    for t in range(total, 0, -1):
        tr_i.residuals[t] = rng.standard_normal((3, 4, 4))
        tr_j.residuals[t] = rng.standard_normal((3, 4, 4))
        tr_i.latents[t - 1] = tr_i.latents[t] + tr_i.residuals[t]
        tr_j.latents[t - 1] = tr_j.latents[t] + tr_j.residuals[t]
        tr_i.taps[t] = {k: rng.standard_normal(v) for k, v in taps_shapes.items()}
        tr_j.taps[t] = {k: rng.standard_normal(v) for k, v in taps_shapes.items()}
    analysis = analyze_pair(tr_i, tr_j, nets=nets, source="taps", candidates=[2],
                            keep_means_at=[2])
    assert analysis.suffix_means[2].shape == (16, 16)
    assert analysis.curve.shape == (1,)
    with pytest.raises(ValueError, match="nets"):
        analyze_pair(tr_i, tr_j, nets=None, source="taps")
