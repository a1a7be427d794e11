import math

import numpy as np
import pandas as pd
import pytest

from ccopf import (
    SamplePoint,
    ScenarioError,
    build_injection_map,
    draw_full_days,
    draw_random,
    gamma_from_pf,
    injections_for,
    load_timeseries,
    save_timeseries,
    synthesize,
    take_days,
    validate_series,
)

from conftest import constant_scenarios, three_node_doc, write_feeder


def renamed_doc(n_houses=3):
    """three_node layout but with h01.. house ids matching synthesize()."""
    doc = three_node_doc(n_houses=n_houses)
    for coll in ("loads", "inverters"):
        for i, entry in enumerate(doc[coll]):
            entry["house_id"] = f"h{i + 1:02d}"
    return doc


@pytest.fixture()
def synth_feeder(tmp_path):
    feeder = write_feeder(tmp_path / "f.json", renamed_doc())
    return feeder


# ---------------------------------------------------------------- basics


def test_gamma_from_pf_values():
    assert abs(gamma_from_pf(0.9) - math.sqrt(0.19) / 0.9) < 1e-15
    assert gamma_from_pf(1.0) == 0.0
    for bad in (0.0, -0.5, 1.4):
        with pytest.raises(ScenarioError):
            gamma_from_pf(bad)


def test_synthesize_shapes_and_determinism():
    s1 = synthesize(3, 2, 5)
    s2 = synthesize(3, 2, 5)
    assert s1.house_ids == ("h01", "h02", "h03")
    assert s1.days == (0, 1)
    assert s1.p_gen.shape == (2, 1440, 3)
    assert s1.p_load.shape == (2, 1440, 3)
    assert np.array_equal(s1.p_gen, s2.p_gen)
    assert np.array_equal(s1.p_load, s2.p_load)
    assert (s1.p_gen >= 0).all() and (s1.p_load >= 0).all()
    # no sun outside the daylight window
    assert s1.p_gen[:, :360, :].max() == 0.0
    assert s1.p_gen[:, 1200:, :].max() == 0.0
    assert s1.p_gen.max() > 1.0
    assert s1.p_load.mean() > 0.1


def test_synthesize_is_prefix_stable():
    # per-house seeding: adding houses must not change existing ones
    small = synthesize(2, 3, 9)
    big = synthesize(4, 3, 9)
    assert np.array_equal(big.p_gen[:, :, :2], small.p_gen)
    assert np.array_equal(big.p_load[:, :, :2], small.p_load)


def test_validate_series(synth_feeder):
    series = synthesize(3, 1, 5)
    validate_series(series, synth_feeder)
    with pytest.raises(ScenarioError, match="lacks data"):
        validate_series(synthesize(2, 1, 5), synth_feeder)
    with pytest.raises(ScenarioError, match="unknown house"):
        validate_series(synthesize(4, 1, 5), synth_feeder)


def test_restrict_unknown_day():
    series = synthesize(1, 2, 5)
    with pytest.raises(ScenarioError, match="not present"):
        series.restrict([7])


# ---------------------------------------------------------------- CSV io


def test_csv_round_trip(tmp_path, synth_feeder):
    series = synthesize(3, 2, 5)
    path = tmp_path / "ts.csv"
    save_timeseries(series, path)
    back = load_timeseries(path, synth_feeder)
    assert back.house_ids == series.house_ids
    assert back.days == series.days
    assert np.allclose(back.p_gen, series.p_gen, rtol=1e-9, atol=1e-12)
    assert np.allclose(back.p_load, series.p_load, rtol=1e-9, atol=1e-12)


def test_csv_scale_multiplies_powers(tmp_path, synth_feeder):
    series = synthesize(3, 1, 5)
    path = tmp_path / "ts.csv"
    save_timeseries(series, path)
    doubled = load_timeseries(path, synth_feeder, scale=2.0)
    assert np.allclose(doubled.p_gen, 2.0 * series.p_gen, rtol=1e-9)
    assert np.allclose(doubled.p_load, 2.0 * series.p_load, rtol=1e-9)


def csv_frame(tmp_path, days=1):
    series = synthesize(3, days, 5)
    path = tmp_path / "ts.csv"
    save_timeseries(series, path)
    return pd.read_csv(path), path


def test_csv_missing_column(tmp_path, synth_feeder):
    df, path = csv_frame(tmp_path)
    df.drop(columns=["p_load_kw"]).to_csv(path, index=False)
    with pytest.raises(ScenarioError, match="missing column"):
        load_timeseries(path, synth_feeder)


def test_csv_duplicate_row(tmp_path, synth_feeder):
    df, path = csv_frame(tmp_path)
    pd.concat([df, df.iloc[[10]]]).to_csv(path, index=False)
    with pytest.raises(ScenarioError, match="duplicate"):
        load_timeseries(path, synth_feeder)


def test_csv_gap_rejected_then_filled(tmp_path, synth_feeder):
    df, path = csv_frame(tmp_path)
    hole = (df["minute"] == 100) & (df["house_id"] == "h01")
    df[~hole].to_csv(path, index=False)
    with pytest.raises(ScenarioError, match="missing minute 100"):
        load_timeseries(path, synth_feeder)
    filled = load_timeseries(path, synth_feeder, fill_gaps=True)
    # forward fill copies minute 99
    assert filled.p_gen[0, 100, 0] == filled.p_gen[0, 99, 0]
    assert not np.isnan(filled.p_gen).any()


def test_csv_unknown_house(tmp_path, synth_feeder):
    df, path = csv_frame(tmp_path)
    df.loc[df["house_id"] == "h03", "house_id"] = "h99"
    df.to_csv(path, index=False)
    with pytest.raises(ScenarioError, match="unknown house"):
        load_timeseries(path, synth_feeder)


def test_csv_negative_power(tmp_path, synth_feeder):
    df, path = csv_frame(tmp_path)
    df.loc[5, "p_load_kw"] = -1.0
    df.to_csv(path, index=False)
    with pytest.raises(ScenarioError, match="negative"):
        load_timeseries(path, synth_feeder)


def test_csv_minute_out_of_range(tmp_path, synth_feeder):
    df, path = csv_frame(tmp_path)
    df.loc[5, "minute"] = 1440
    df.to_csv(path, index=False)
    with pytest.raises(ScenarioError, match="0..1439"):
        load_timeseries(path, synth_feeder)


def test_csv_file_not_found(tmp_path, synth_feeder):
    with pytest.raises(ScenarioError, match="not found"):
        load_timeseries(tmp_path / "nope.csv", synth_feeder)


# ---------------------------------------------------------------- sampling


def test_take_days_is_chronological():
    series = synthesize(2, 3, 5)
    sc = take_days(series, [2, 0])
    assert sc.m == 2 * 1440
    assert sc.has_time_structure
    assert sc.day[0] == 0 and sc.day[-1] == 2
    assert sc.minute[0] == 0 and sc.minute[1439] == 1439
    first = sc.sample(0)
    assert first.day == 0 and first.minute == 0
    assert np.array_equal(first.p_gen, series.p_gen[0, 0])


def test_draw_random_is_deterministic_and_faithful():
    series = synthesize(2, 3, 5)
    a = draw_random(series, 50, rng_seed=42)
    b = draw_random(series, 50, rng_seed=42)
    c = draw_random(series, 50, rng_seed=43)
    assert np.array_equal(a.day, b.day) and np.array_equal(a.minute, b.minute)
    assert not (np.array_equal(a.day, c.day) and np.array_equal(a.minute, c.minute))
    # each decoded (day, minute) must carry that slot's data
    for i in range(a.m):
        d = series.days.index(int(a.day[i]))
        assert np.array_equal(a.p_gen[i], series.p_gen[d, a.minute[i]])
        assert np.array_equal(a.p_load[i], series.p_load[d, a.minute[i]])
    # no duplicate slots when sampling without replacement
    slots = set(zip(a.day.tolist(), a.minute.tolist()))
    assert len(slots) == a.m


def test_draw_random_pool_exhausted():
    series = synthesize(1, 1, 5)
    with pytest.raises(ScenarioError, match="pool"):
        draw_random(series, 1441, rng_seed=1)


def test_draw_full_days_determinism():
    series = synthesize(1, 6, 5)
    a = draw_full_days(series, 2, rng_seed=3)
    b = draw_full_days(series, 2, rng_seed=3)
    assert np.array_equal(a.day, b.day)
    assert a.m == 2 * 1440
    assert len(set(a.day.tolist())) == 2
    assert np.all(np.diff(a.day) >= 0)
    with pytest.raises(ScenarioError, match="cannot draw"):
        draw_full_days(series, 7, rng_seed=3)


def test_scenario_set_statistics():
    sc = constant_scenarios(("h01", "h02"), 3.0, 1.0, m=5)
    assert sc.m == 5
    assert not sc.has_time_structure
    assert np.array_equal(sc.p_gen_avg, [3.0, 3.0])
    assert np.array_equal(sc.p_load_avg, [1.0, 1.0])
    mean = sc.mean_sample()
    assert mean.day is None and mean.minute is None
    assert np.array_equal(mean.p_gen, sc.p_gen_avg)


# ---------------------------------------------------------------- injections


def test_injections_hand_computed(tmp_path):
    feeder = write_feeder(tmp_path / "f.json", three_node_doc(n_houses=2))
    from ccopf import assemble_admittance

    ybus = assemble_admittance(feeder)
    sample = SamplePoint(
        house_ids=("g1", "g2"),
        p_gen=np.array([1.0, 2.0]),
        p_load=np.array([0.5, 0.3]),
    )
    q_set = np.array([0.01, -0.02])
    p, q = injections_for(sample, q_set, feeder, ybus)

    gamma = gamma_from_pf(0.9)
    ia = ybus.pos("n2", "a")
    ib = ybus.pos("n2", "b")
    assert abs(p[ia] - (1.0 - 0.5) / 1000.0) < 1e-15
    assert abs(p[ib] - (2.0 - 0.3) / 1000.0) < 1e-15
    assert abs(q[ia] - (0.01 - gamma * 0.5 / 1000.0)) < 1e-15
    assert abs(q[ib] - (-0.02 - gamma * 0.3 / 1000.0)) < 1e-15
    # everything else, slack included, stays zero
    untouched = [i for i in range(ybus.n_conn) if i not in (ia, ib)]
    assert np.all(p[untouched] == 0.0)
    assert np.all(q[untouched] == 0.0)


def test_injection_map_requires_all_houses(tmp_path):
    feeder = write_feeder(tmp_path / "f.json", three_node_doc(n_houses=2))
    from ccopf import assemble_admittance

    ybus = assemble_admittance(feeder)
    with pytest.raises(ScenarioError, match="lacks data"):
        build_injection_map(feeder, ybus, ("g1",))


def test_load_scale_field_applies(tmp_path):
    doc = three_node_doc(n_houses=1)
    doc["loads"][0]["scale"] = 2.5
    feeder = write_feeder(tmp_path / "f.json", doc)
    from ccopf import assemble_admittance

    ybus = assemble_admittance(feeder)
    sc = constant_scenarios(("g1",), 0.0, 1.0, m=1)
    p, q = injections_for(sc.sample(0), np.zeros(1), feeder, ybus)
    ia = ybus.pos("n2", "a")
    assert abs(p[ia] + 2.5 * 1.0 / 1000.0) < 1e-15
