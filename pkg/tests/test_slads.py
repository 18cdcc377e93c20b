import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from edsslads.nn import ConfigurationError
from edsslads.phantom import synth_label_image
from edsslads.reconstruction import InputError, LabelField, MeasurementSet
from edsslads.slads import (
    ERDMap,
    N_FEATURES,
    TRACE_COLUMNS,
    SamplingComplete,
    SamplingConfig,
    estimate_erd,
    extract_features,
    halton_locations,
    read_trace,
    run_random_sampling,
    run_slads,
    select_next,
    write_trace,
)
from edsslads.training import train_erd_model

from .fakes import LabelObject, OracleTier, disc, half_plane
from .oracles import brute_argmax, count_mismatches


def _field(N, rows, cols, labels, K=10):
    return LabelField.from_measurements(N, MeasurementSet(rows, cols, labels), K)


@pytest.fixture(scope="module")
def erd_model():
    images = [synth_label_image(48, 2, "lamellar", seed=s) for s in (101, 102)]
    model, _ = train_erd_model(images, samples_per_level=150, seed=0)
    return model


# -- features ----------------------------------------------------------------------


def test_homogeneous_neighbourhood_has_no_disagreement():
    lf = _field(16, [2, 2, 13, 13], [2, 13, 2, 13], [1, 1, 1, 1])
    v = extract_features(lf, (8, 8))
    assert v.shape == (N_FEATURES,)
    assert v[2] == 0.0 and v[3] == 0.0 and v[4] == 0.0
    assert v[5] == 1.0


def test_mixed_neighbourhood_has_disagreement():
    lf = _field(16, [8, 8, 0, 15], [6, 10, 0, 15], [1, 2, 1, 2])
    v = extract_features(lf, (8, 8))
    assert v[2] > 0 and v[3] > 0


def test_density_increases_with_nearby_samples():
    lf = _field(32, [0], [0], [1])
    before = extract_features(lf, (16, 16))[1]
    lf.add(15, 16, 1)
    after = extract_features(lf, (16, 16))[1]
    assert after > before
    assert extract_features(lf, (16, 17))[0] > extract_features(lf, (30, 30))[0]


def test_features_reject_measured_pixel():
    lf = _field(8, [1], [1], [1])
    with pytest.raises(InputError):
        extract_features(lf, (1, 1))


# -- ERD estimate ------------------------------------------------------------------


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=N_FEATURES, max_size=N_FEATURES),
       st.lists(st.floats(-5, 5), min_size=N_FEATURES, max_size=N_FEATURES),
       st.floats(-3, 3))
def test_erd_is_linear(a, b, s):
    theta = np.linspace(-1, 1, N_FEATURES)
    a, b = np.array(a), np.array(b)
    lhs = estimate_erd(theta, a + s * b)
    assert lhs == pytest.approx(estimate_erd(theta, a) + s * estimate_erd(theta, b), abs=1e-9)


def test_erd_basis_vectors_return_coefficients():
    theta = np.arange(1.0, N_FEATURES + 1)
    for i in range(N_FEATURES):
        assert estimate_erd(theta, np.eye(N_FEATURES)[i]) == theta[i]
    with pytest.raises(InputError):
        estimate_erd(theta, np.ones(N_FEATURES + 1))


# -- selection ---------------------------------------------------------------------


@pytest.mark.parametrize("seed", range(6))
def test_select_next_matches_exhaustive_argmax(seed):
    rng = np.random.default_rng(seed)
    N = 16
    flat = rng.choice(N * N, size=20, replace=False)
    rows, cols = np.divmod(flat, N)
    lf = _field(N, rows, cols, rng.integers(1, 3, size=20))
    theta = rng.normal(size=N_FEATURES)
    values, allowed = [], []
    for r in range(N):
        for c in range(N):
            free = lf.order[r * N + c] < 0
            allowed.append(free)
            values.append(estimate_erd(theta, extract_features(lf, (r, c))) if free else 0.0)
    assert select_next(theta, lf) == divmod(brute_argmax(values, allowed), N)


def test_select_next_ties_go_row_major():
    lf = _field(16, [0], [0], [1])
    theta = np.zeros(N_FEATURES)
    theta[-1] = 1.0  # bias only: every pixel ties
    assert select_next(theta, lf) == (0, 1)


def test_select_next_single_remaining_pixel():
    N = 4
    pix = [p for p in range(N * N) if p != 9]
    rows, cols = np.divmod(np.array(pix), N)
    lf = _field(N, rows, cols, np.ones(len(pix), dtype=int))
    assert select_next(np.ones(N_FEATURES), lf) == (2, 1)
    lf.add(2, 1, 1)
    with pytest.raises(SamplingComplete):
        select_next(np.ones(N_FEATURES), lf)


def test_erd_map_tracks_full_recompute(erd_model):
    N = 32
    truth = disc(N)
    rows, cols = halton_locations(N, 10, seed=1)
    lf = _field(N, rows, cols, truth[rows, cols])
    emap = ERDMap(lf, erd_model)
    for step in range(300):
        r, c = emap.select_next()
        emap.add(r, c, int(truth[r, c]))
        if step % 50 == 0:
            fresh = ERDMap(LabelField.from_measurements(N, lf.measurements(), 10), erd_model)
            np.testing.assert_allclose(emap.erd, fresh.erd, rtol=0, atol=1e-12)


def test_erd_map_rejects_other_feature_versions(erd_model):
    import copy

    stale = copy.deepcopy(erd_model)
    stale.feature_version_ = "something-else"
    with pytest.raises(ConfigurationError):
        ERDMap(_field(8, [0], [0], [1]), stale)


# -- the loop ----------------------------------------------------------------------


def test_halton_locations_distinct_and_seeded():
    r, c = halton_locations(32, 50, seed=3)
    assert len(set(zip(r.tolist(), c.tolist()))) == 50
    r2, c2 = halton_locations(32, 50, seed=3)
    np.testing.assert_array_equal(r, r2)
    np.testing.assert_array_equal(c, c2)


def test_sampling_config_validation():
    with pytest.raises(ConfigurationError):
        SamplingConfig(0.2, 0.1)
    with pytest.raises(ConfigurationError):
        SamplingConfig(0.0, 0.1)
    with pytest.raises(ConfigurationError):
        SamplingConfig(0.01, 0.1, n_neighbors=0)


def test_run_slads_invariants(erd_model):
    N = 32
    truth = disc(N)
    obj = LabelObject(truth)
    tier = OracleTier(2)
    res = run_slads(obj, erd_model, tier, cfg=SamplingConfig(0.01, 0.4, seed=2))
    pix = [(row[2], row[1]) for row in res.trace]
    assert len(pix) == len(set(pix)) == round(0.4 * N * N)
    assert [row[0] for row in res.trace] == list(range(1, len(pix) + 1))
    rec = res.reconstruction
    for y, x in pix:
        assert rec[y, x] == truth[y, x]
    for row in res.trace:
        if row[5] is not None:
            assert 0.0 <= row[5] <= 1.0
    assert res.trace[-1][5] == count_mismatches(truth, rec) / (N * N)


def test_incremental_td_matches_recount(erd_model):
    N = 24
    truth = half_plane(N, 9)
    obj = LabelObject(truth)
    seen = []

    def check(row):
        seen.append(row)

    res = run_slads(obj, erd_model, OracleTier(2), cfg=SamplingConfig(0.02, 0.3, seed=0),
                    on_step=check)
    assert seen == res.trace
    replay = LabelField(N, 10, 2)
    for k, x, y, lab, _, td in res.trace:
        replay.add(y, x, lab)
        if td is not None:
            assert td == count_mismatches(replay.image(), truth) / (N * N)


def test_stop_equal_to_initial_runs_no_iterations(erd_model):
    obj = LabelObject(half_plane(16))
    res = run_slads(obj, erd_model, OracleTier(2), cfg=SamplingConfig(0.05, 0.05))
    assert len(res.trace) == round(0.05 * 256)
    assert all(row[5] is None for row in res.trace)


def test_full_coverage_is_exact(erd_model):
    truth = disc(12)
    obj = LabelObject(truth)
    res = run_slads(obj, erd_model, OracleTier(2), cfg=SamplingConfig(0.05, 1.0))
    np.testing.assert_array_equal(res.reconstruction, truth)
    assert res.mask.all()
    assert res.trace[-1][5] == 0.0


def test_run_slads_rejects_mismatched_spectrum_length(erd_model):
    obj = LabelObject(half_plane(8))
    tier = OracleTier(2)
    tier.detector_.n_features_in_ = 7
    with pytest.raises(ConfigurationError):
        run_slads(obj, erd_model, tier)


def test_run_slads_deterministic(erd_model):
    obj = LabelObject(disc(24))
    cfg = SamplingConfig(0.02, 0.2, seed=4)
    a = run_slads(obj, erd_model, OracleTier(2), cfg=cfg)
    b = run_slads(obj, erd_model, OracleTier(2), cfg=cfg)
    assert a.trace == b.trace


def test_slads_beats_random_on_average(erd_model):
    N = 64
    ours, rand = [], []
    for seed in range(10):
        truth = synth_label_image(N, 2, "lamellar", seed=500 + seed)
        obj = LabelObject(truth)
        ours.append(run_slads(obj, erd_model, OracleTier(2),
                              cfg=SamplingConfig(0.01, 0.15, seed=seed)).total_distortion(truth))
        rand.append(run_random_sampling(obj, OracleTier(2), fraction=0.15,
                                        seed=seed).total_distortion(truth))
    assert np.mean(ours) <= np.mean(rand)


def test_trace_round_trip(tmp_path, erd_model):
    obj = LabelObject(half_plane(16))
    res = run_slads(obj, erd_model, OracleTier(2), cfg=SamplingConfig(0.02, 0.1))
    path = tmp_path / "trace.csv"
    write_trace(path, res.trace)
    assert path.read_text().splitlines()[0] == ",".join(TRACE_COLUMNS)
    rows = read_trace(path)
    assert len(rows) == len(res.trace)
    last = res.trace[-1]
    assert int(rows[-1]["x"]) == last[1] and int(rows[-1]["y"]) == last[2]
    assert float(rows[-1]["td"]) == pytest.approx(last[5], abs=1e-10)
    assert rows[0]["td"] == ""
