import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from skipalign.checks import check_positions
from skipalign.corpus import DataError, Role, Sample
from skipalign.skip import (
    SkipConfig,
    SkipPlan,
    Strategy,
    SubsampleMode,
    apply_plan,
    augment,
    dense_positions,
    is_eligible,
    plan_skips,
    sample_rng,
)

I, R = Role.INSTRUCTION, Role.RESPONSE


@pytest.mark.parametrize(
    "strategy,expected",
    [
        (Strategy.SKIP_ALL, [False, True, True, True, True]),
        (Strategy.SKIP_INNER, [False, True, False, True, False]),
        (Strategy.SKIP_OUTER, [False, False, True, False, True]),
    ],
)
def test_eligibility_table(strategy, expected):
    roles = [I, R, I, R, I]
    assert [is_eligible(i, r, strategy) for i, r in enumerate(roles)] == expected


def test_skip_first_block_flag():
    assert is_eligible(0, I, Strategy.SKIP_ALL, skip_first_block=True)
    assert is_eligible(0, I, Strategy.SKIP_OUTER, skip_first_block=True)
    assert not is_eligible(0, I, Strategy.SKIP_INNER, skip_first_block=True)


def test_strategy_parse_aliases():
    assert Strategy.parse("SkipOuter") is Strategy.SKIP_OUTER
    assert Strategy.parse("skip_inner") is Strategy.SKIP_INNER
    assert Strategy.parse("skip-all") is Strategy.SKIP_ALL
    with pytest.raises(ValueError):
        Strategy.parse("skip-some")


def test_config_validation():
    with pytest.raises(ValueError):
        SkipConfig(p=1.5)
    with pytest.raises(ValueError):
        SkipConfig(L=0)
    with pytest.raises(ValueError):
        SkipConfig(L=1000).check_truncation(4096)
    SkipConfig().check_truncation(4096)


def test_worked_example():
    # plan given by hand, positions follow from cumulative shifts
    s = Sample.from_lengths("s", [3, 2, 2, 2])
    plan = SkipPlan("s", [0, 0, 5, 0], [0, 0, 5, 5], [False, False, True, False], [True] * 4, [False] * 4)
    pa = apply_plan(s, plan)
    assert pa.per_token_positions.tolist() == [0, 1, 2, 3, 4, 10, 11, 12, 13]
    assert pa.block_starts == [0, 3, 10, 12]


def test_apply_plan_rejects_decreasing_shifts():
    s = Sample.from_lengths("s", [1, 1])
    with pytest.raises(DataError):
        apply_plan(s, SkipPlan("s", [0, 0], [3, 1], [False] * 2, [False] * 2, [False] * 2))
    with pytest.raises(DataError):
        apply_plan(s, SkipPlan("s", [0], [0], [False], [False], [False]))


def test_p_zero_is_dense():
    s = Sample.from_lengths("s", [10, 20, 30, 40])
    for strat in Strategy:
        plan = plan_skips(s, SkipConfig(p=0.0, strategy=strat))
        assert plan.skip_steps == [0, 0, 0, 0]
        assert apply_plan(s, plan) == dense_positions(s)


def test_p_one_always_skips_eligible():
    s = Sample.from_lengths("s", [10, 20, 30, 40, 50])
    plan = plan_skips(s, SkipConfig(p=1.0, strategy=Strategy.SKIP_ALL))
    assert plan.skip_steps[0] == 0
    assert all(x >= 1 for x in plan.skip_steps[1:])


def test_saturation_when_budget_is_used():
    # L - |m| = 1: the first eligible skip takes the single slot, later ones saturate
    s = Sample.from_lengths("s", [2, 2, 2, 2])
    plan = plan_skips(s, SkipConfig(L=9, p=1.0, strategy=Strategy.SKIP_ALL))
    assert plan.skip_steps == [0, 1, 0, 0]
    assert plan.saturated == [False, False, True, True]
    pa = apply_plan(s, plan)
    assert pa.per_token_positions.max() == 8


def test_length_equal_L_has_no_room():
    s = Sample.from_lengths("s", [4, 4])
    plan = plan_skips(s, SkipConfig(L=8, p=1.0, strategy=Strategy.SKIP_ALL))
    assert plan.skip_steps == [0, 0]
    assert plan.saturated == [False, True]


def test_overlong_sample_rejected():
    with pytest.raises(DataError):
        plan_skips(Sample.from_lengths("s", [5, 5]), SkipConfig(L=9))


def test_determinism_is_keyed_by_sample_id():
    cfg = SkipConfig(L=10_000, p=0.5, strategy=Strategy.SKIP_ALL, seed=4)
    a = plan_skips(Sample.from_lengths("a", [5] * 6), cfg)
    a2 = plan_skips(Sample.from_lengths("a", [5] * 6), cfg)
    assert a == a2
    draws = [sample_rng(4, sid).random() for sid in ("a", "b", "c")]
    assert len(set(draws)) == 3


def test_different_seeds_differ():
    s = Sample.from_lengths("a", [5] * 10)
    plans = {tuple(plan_skips(s, SkipConfig(p=1.0, strategy="skip-all", seed=k)).skip_steps) for k in range(5)}
    assert len(plans) == 5


def test_per_sample_mode_fires_all_or_nothing():
    s = Sample.from_lengths("s", [3] * 9)
    seen = set()
    for seed in range(40):
        plan = plan_skips(s, SkipConfig(p=0.5, strategy="skip-all", seed=seed, subsample_mode="per-sample"))
        fired = plan.bernoulli_draws
        assert all(fired) or not any(fired)
        seen.add(all(fired))
    assert seen == {True, False}


def test_metadata_fields():
    s = Sample.from_lengths("s", [3, 3, 3])
    cfg = SkipConfig(seed=9)
    meta = plan_skips(s, cfg).metadata(cfg)
    assert meta["strategy"] == "skip-outer" and meta["L"] == 100_000 and meta["seed"] == 9
    assert len(meta["skip_steps"]) == len(meta["cumulative_shifts"]) == 3


lengths_st = st.lists(st.integers(1, 60), min_size=1, max_size=9)


@settings(max_examples=300, deadline=None)
@given(lengths_st, st.sampled_from(list(Strategy)), st.floats(0, 1), st.integers(0, 2**32),
       st.sampled_from(list(SubsampleMode)), st.integers(0, 400))
def test_positions_valid(lengths, strategy, p, seed, mode, slack):
    s = Sample.from_lengths("x", lengths)
    L = s.total_len + slack
    cfg = SkipConfig(L=L, p=p, strategy=strategy, seed=seed, subsample_mode=mode)
    plan = plan_skips(s, cfg)
    pa = apply_plan(s, plan)
    assert check_positions(s.block_lengths, s.roles, pa.per_token_positions, strategy, L) == []
    assert plan.cumulative_shifts[-1] <= L - s.total_len
    # per-block offset recovers the recorded cumulative shift
    starts = np.cumsum([0] + lengths[:-1])
    assert (np.asarray(pa.block_starts) - starts).tolist() == plan.cumulative_shifts


def test_augment_order_and_workers_agree():
    samples = [Sample.from_lengths(f"s{i}", [1 + i % 7, 2, 3 + i % 5, 4]) for i in range(300)]
    cfg = SkipConfig(L=2000, p=0.7, strategy="skip-all", seed=2)
    serial = [(s.id, pa, plan) for s, pa, plan in augment(samples, cfg)]
    par = [(s.id, pa, plan) for s, pa, plan in augment(samples, cfg, workers=3, chunksize=8)]
    assert [x[0] for x in serial] == [s.id for s in samples]
    assert serial == par


def test_augment_error_policy():
    samples = [Sample.from_lengths("ok", [2, 2]), Sample.from_lengths("big", [50, 50])]
    errs = []
    out = list(augment(samples, SkipConfig(L=10), errors=errs))
    assert [s.id for s, _, _ in out] == ["ok"]
    assert errs[0].sample_id == "big"
    with pytest.raises(DataError):
        list(augment(samples, SkipConfig(L=10), on_error="abort"))
