import math
import warnings

import numpy as np
import pytest

from gapshap import envlab, guidance, runner, shapley, surrogate, trainers
from gapshap.config_space import Configuration, default_space, encode
from gapshap.envlab import GRID, PENDULUM
from gapshap.errors import ValidationError
from gapshap.runner import AggregateRecord, ExperimentRecord
from helpers import random_forest, random_inputs


@pytest.fixture(scope="module")
def space():
    return default_space()


def test_candidate_minimum(space):
    model = surrogate.constant_model(1.0, surrogate.GLOBAL_FEATURES, np.zeros((1, 5)))
    with pytest.raises(ValidationError):
        guidance.select_configurations(model, space, 99, np.random.default_rng(0))


def test_constant_model_ties_pick_index_zero(space):
    model = surrogate.constant_model(2.5, surrogate.GLOBAL_FEATURES, np.zeros((4, 5)))
    sel = guidance.select_configurations(model, space, 200, np.random.default_rng(1))
    assert sel.best_index == 0 and sel.worst_index == 0
    assert sel.best == sel.worst
    assert sel.best[1] == sel.worst[1] == 2.5


def test_argmin_contract(space):
    rng = np.random.default_rng(2)
    model = random_forest(rng, 5, n_trees=10, categorical=True)
    model = surrogate.ForestModel(*model.arrays(), surrogate.GLOBAL_FEATURES,
                                  background=random_inputs(rng, 5, 32, True))
    sel = guidance.select_configurations(model, space, 500, np.random.default_rng(5))
    cands = guidance.draw_candidates(space, 500, np.random.default_rng(5))
    pred = model.predict(np.vstack([encode(c, space) for c in cands]))
    assert sel.best[1] == pred.min() and sel.worst[1] == pred.max()
    assert sel.best[0] == cands[int(np.argmin(pred))]
    assert np.all(pred >= sel.best[1]) and np.all(pred <= sel.worst[1])
    # efficiency: base + sum(phi) reproduces each extreme's prediction
    assert sel.base_value + sel.phi_best.sum() == pytest.approx(sel.best[1], abs=1e-9)
    assert sel.base_value + sel.phi_worst.sum() == pytest.approx(sel.worst[1], abs=1e-9)


def test_selection_round_trip(space):
    model = surrogate.constant_model(1.0, surrogate.GLOBAL_FEATURES, np.zeros((1, 5)))
    sel = guidance.select_configurations(model, space, 100, np.random.default_rng(0))
    back = guidance.SelectionReport.from_dict(sel.as_dict())
    assert back.best == sel.best and back.worst == sel.worst
    np.testing.assert_array_equal(back.phi_best, sel.phi_best)


def test_shapley_ranking_matches_prediction_ranking():
    rng = np.random.default_rng(3)
    for _ in range(50):
        model = random_forest(rng, 5, n_trees=6, categorical=True)
        bg = random_inputs(rng, 5, 16, True)
        X = random_inputs(rng, 5, 40, True)
        pred = model.predict(X)
        att = shapley.batch_explain(model, X, bg)
        total = att.base_value + att.phi.sum(axis=1)
        np.testing.assert_allclose(total, pred, rtol=0, atol=1e-9)
        # prediction ties are common in forests; the picked row must attain the extreme
        assert pred[np.argmin(total)] - pred.min() <= 1e-9
        assert pred.max() - pred[np.argmax(total)] <= 1e-9
        order_t, order_p = np.argsort(total, kind="stable"), np.argsort(pred, kind="stable")
        np.testing.assert_allclose(pred[order_t], pred[order_p], rtol=0, atol=1e-9)


def _agg(cid, algo, values, gap, task=GRID, direction="M-P"):
    return AggregateRecord(cid, algo, task, direction, *values, gap, 0.0, gap, 1, 0.0)


def test_nearest_match_exact_and_ties(space):
    target = Configuration(0, (1e-3, 0.9, 0.2, 512.0))
    recs = [_agg(5, 0, (1e-3, 0.9, 0.2, 512.0), 1.0), _agg(3, 0, (1e-2, 0.9, 0.2, 512.0), 2.0),
            _agg(1, 1, (1e-3, 0.9, 0.95, 0.5), 3.0)]
    m = guidance.nearest_match(target, recs, space)[(GRID, "M-P")]
    assert m.distance == 0.0 and m.record.config_id == 5
    # equidistant records: the lower config_id wins whatever the input order
    near = (1e-3, 0.9, 0.25, 512.0)
    recs = [_agg(9, 0, near, 0.0), _agg(4, 0, near, 0.0), _agg(7, 0, near, 0.0)]
    m = guidance.nearest_match(target, recs, space)[(GRID, "M-P")]
    assert m.record.config_id == 4 and m.distance > 0
    with pytest.raises(ValidationError):
        guidance.nearest_match(Configuration(3, (1e-3, 0.9, 0.005, 0.1)), recs, space)


def test_nearest_match_distance_zero_iff_present(space):
    rng = np.random.default_rng(4)
    from gapshap.config_space import sample
    cfgs = [sample(space, 2, rng) for _ in range(20)]
    recs = [_agg(i, 2, c.values, 0.0) for i, c in enumerate(cfgs)]
    for c in cfgs[:5]:
        assert guidance.nearest_match(c, recs, space)[(GRID, "M-P")].distance == 0.0
    other = sample(space, 2, rng)
    assert guidance.nearest_match(other, recs, space)[(GRID, "M-P")].distance > 0.0


def test_nearest_match_per_cell(space):
    target = Configuration(0, (1e-3, 0.9, 0.2, 512.0))
    recs = []
    for ti, task in enumerate(envlab.TASKS):
        for di, d in enumerate(runner.DIRECTIONS):
            recs.append(_agg(0, 0, target.values, float(ti + di), task, d))
    assert len(guidance.nearest_match(target, recs, space)) == 4


def _selection(best_cfg, worst_cfg, pb=-1.0, pw=1.0):
    z = np.zeros(5)
    return guidance.SelectionReport((best_cfg, pb), (worst_cfg, pw), 100, z, z, 0.0,
                                    surrogate.GLOBAL_FEATURES)


def test_validate_selection_ordering(space):
    good = Configuration(0, (1e-3, 0.9, 0.2, 512.0))
    bad = Configuration(1, (1e-2, 0.99, 0.95, 0.5))
    recs = [_agg(0, 0, good.values, -2.0), _agg(1, 1, bad.values, 3.0),
            _agg(0, 0, good.values, -1.0, direction="P-M"), _agg(1, 1, bad.values, 5.0, direction="P-M")]
    rep = guidance.validate_selection(_selection(good, bad), recs, space)
    assert rep.mean_actual_best == -1.5 and rep.mean_actual_worst == 4.0
    assert rep.directional_consistent
    assert all(row["distance"] == 0.0 for row in rep.rows)
    assert all(row["sign_consistent"] for row in rep.rows)


def test_validate_identical_picks(space):
    cfg = Configuration(0, (1e-3, 0.9, 0.2, 512.0))
    recs = [_agg(0, 0, cfg.values, 1.0)]
    rep = guidance.validate_selection(_selection(cfg, cfg), recs, space)
    assert rep.mean_actual_best == rep.mean_actual_worst
    assert not rep.directional_consistent


def test_validate_aggregates_raw_records(space):
    cfg = Configuration(0, (1e-3, 0.9, 0.2, 512.0))
    raw = [ExperimentRecord(0, 0, GRID, "M-P", s, *cfg.values, 1.0 + s, 0.0, 1.0 + s, False)
           for s in range(2)]
    rep = guidance.validate_selection(_selection(cfg, cfg), raw, space)
    assert rep.mean_actual_best == 1.5


def test_validate_coverage(space):
    cfg = Configuration(0, (1e-3, 0.9, 0.2, 512.0))
    other = Configuration(1, (1e-3, 0.9, 0.95, 0.5))
    recs = [_agg(0, 0, cfg.values, 1.0), _agg(1, 1, other.values, 1.0, task=PENDULUM)]
    with pytest.raises(ValidationError):
        guidance.validate_selection(_selection(cfg, other), recs, space)


# -- sensitivity ----------------------------------------------------------------

def _analytic(w, omega):
    env = envlab.analytic_fixture(w, omega)
    policy = trainers.Policy(trainers.GREEDY_Q, np.zeros((1, 1)), envlab.ANALYTIC)
    return env, policy


def test_analytic_gradient_exact():
    rng = np.random.default_rng(5)
    for _ in range(20):
        w = rng.normal(size=4)
        env, pol = _analytic(w, rng.uniform(0.5, 2.0, 4))
        est = guidance.estimate_sensitivity(pol, envlab.ANALYTIC, "M", env.physics, 0.01, 3, 0,
                                            env=env)
        np.testing.assert_allclose(est.components, w, rtol=0, atol=1e-10)
        assert est.S == pytest.approx(np.linalg.norm(w), abs=1e-10)
        half = guidance.estimate_sensitivity(pol, envlab.ANALYTIC, "M", env.physics, 0.005, 3,
                                             0, env=env)
        np.testing.assert_allclose(half.components, est.components, rtol=0, atol=1e-10)


def test_analytic_zero_and_unit_weights():
    env, pol = _analytic([0.0, 0.0], [1.0, 0.0])
    est = guidance.estimate_sensitivity(pol, envlab.ANALYTIC, "M", env.physics, 0.05, 1, 0, env=env)
    assert est.S == 0.0
    env, pol = _analytic([1.0, 0.0, 0.0], [1.0, 2.0, 0.0])
    est = guidance.estimate_sensitivity(pol, envlab.ANALYTIC, "M", env.physics, 0.05, 1, 0, env=env)
    assert est.raw_gradient[0] == pytest.approx(1.0, abs=1e-12)
    assert est.deltas[2] == 0.05  # zero field uses the relative step as absolute


def test_delta_rel_range():
    env, pol = _analytic([1.0], [1.0])
    for bad in (0.0, 0.2, -0.01):
        with pytest.raises(ValidationError):
            guidance.estimate_sensitivity(pol, envlab.ANALYTIC, "M", env.physics, bad, 1, 0, env=env)


def _always(action, nf, na):
    table = np.zeros((nf, na))
    table[:, action] = 1.0
    return trainers.Policy(trainers.GREEDY_Q, table, GRID, 0.0)


def test_corridor_slip_component_near_zero():
    presets = envlab.default_presets()
    omega = presets.physics(GRID, "M")
    corridor = envlab.make_env(GRID, "M", layout=envlab.CORRIDOR)
    right = _always(1, 6, 4)
    est = guidance.estimate_sensitivity(right, GRID, "M", omega, 0.1, 400, 7, env=corridor)
    comps = dict(zip(est.fields, est.components))
    assert comps["wind_bias"] == 0.0
    assert abs(comps["slip_prob"]) < 0.01
    # along the cliff edge the same policy is far more slip-sensitive
    cliff = envlab.make_env(GRID, "M")
    lay = cliff.layout
    table = np.zeros((lay.width * lay.height, 4))
    table[:, 1] = 1.0
    table[lay.start, 0] = 2.0
    for x in range(lay.width):
        table[lay.width + x, 1] = 1.0
    table[lay.width + lay.width - 1, 2] = 2.0
    edge = trainers.Policy(trainers.GREEDY_Q, table, GRID, 0.0)
    est2 = guidance.estimate_sensitivity(edge, GRID, "M", omega, 0.1, 400, 7, env=cliff)
    comps2 = dict(zip(est2.fields, est2.components))
    assert abs(comps2["slip_prob"]) > 10 * abs(comps["slip_prob"])


def test_pendulum_excludes_friction_mode_and_clamps():
    env = envlab.make_env(PENDULUM, "M")
    table = np.zeros((648, 5))
    pol = trainers.Policy(trainers.SOFTMAX_LINEAR, table, PENDULUM)
    est = guidance.estimate_sensitivity(pol, PENDULUM, "M", env.physics, 0.01, 2, 0)
    assert est.excluded == ("friction_mode",)
    assert "friction_mode" not in est.fields
    assert est.S == pytest.approx(float(np.linalg.norm(est.components)), rel=1e-15)
    omega = envlab.default_presets().physics(GRID, "M").replace(slip_prob=1.0)
    grid_pol = _always(1, 24, 4)
    with pytest.warns(UserWarning, match="slip_prob"):
        est = guidance.estimate_sensitivity(grid_pol, GRID, "M", omega, 0.1, 4, 0)
    assert "slip_prob" in est.clamped


# -- bound ----------------------------------------------------------------------

def test_bound_tight_on_analytic_family():
    rng = np.random.default_rng(6)
    w = rng.normal(size=3)
    triples = guidance.analytic_family(w, rng.uniform(1, 2, 3), [0.0, 0.1, 0.5, 1.0])
    for rec, est, d in triples:
        rep = guidance.check_bound([rec], {guidance.record_key(rec): est}, d)
        row = rep.rows[0]
        assert row["eps_opt"] == 0.0
        assert abs(row["bound"] - row["gap"]) <= 1e-10
        assert row["bound"] == row["S"] * row["distance"] + row["eps_opt"]


def test_bound_eps_opt_and_correlation():
    recs = [_agg(i, 0, (1e-3, 0.9, 0.2, 512.0), g) for i, g in enumerate([1.0, 2.0, 3.0, 4.0])]
    recs = [AggregateRecord(r.config_id, 0, GRID, "M-P", *r.configuration.values, js, 0.0, r.gap, 1, 0.0)
            for r, js in zip(recs, [5.0, 3.0, 2.0, 1.0])]
    sens = {guidance.record_key(r): s for r, s in zip(recs, [0.1, 0.2, 0.3, 0.4])}
    rep = guidance.check_bound(recs, sens, 2.0)
    assert rep.rows[0]["eps_opt"] == 0.0
    assert rep.rows[3]["eps_opt"] == 4.0
    assert rep.spearman == pytest.approx(1.0)
    assert not rep.flags
    for row in rep.rows:
        assert row["bound"] == row["S"] * row["distance"] + row["eps_opt"]
    with pytest.raises(ValidationError):
        guidance.check_bound(recs, {}, 2.0)


def test_retrain_reproduces_run(tmp_path, space):
    spec = runner.RunSpec((GRID,), ("M-P",), 1, 1, trainers.TrainBudget(500, 3), 9)
    out = tmp_path / "r.jsonl"
    store = runner.run_experiments(spec, space, out)
    import json
    manifest = json.loads(runner.manifest_path(out).read_text())
    rec = store.records[2]
    pol = guidance.retrain_policy(rec, manifest)
    env_s = envlab.make_env(GRID, "M")
    seed = runner.derive_seed(9, GRID, "M-P", rec.algorithm_id, 0, 0, "eval") >> 1
    assert trainers.evaluate(pol, env_s, 3, seed) == rec.J_source
    res = guidance.sweep_sensitivities(store.records[:2], manifest, 0.01, 2, 0)
    assert len(res) == 2 and all(e.S >= 0 for _, e in res)
