import pytest
from hypothesis import given, strategies as st

from kpasim.workload import (
    CalibrationConstants,
    ServiceDemand,
    WorkloadProfile,
    builtin_profiles,
    get_profile,
    service_demand,
)

# transcribed from the published concurrency-test table ("-" cells read as 0)
TABLE = [
    ("I", 0, 0, 0), ("II", 128, 0, 0), ("III", 128, 1000, 0), ("IV", 128, 10000, 0),
    ("V", 128, 100000, 0), ("VI", 128, 1000, 1000), ("VII", 128, 10000, 1000),
    ("VIII", 128, 100000, 1000), ("IX", 256, 0, 0), ("X", 256, 1000, 0), ("XI", 256, 10000, 0),
    ("XII", 256, 100000, 0), ("XIII", 256, 1000, 1000), ("XIV", 256, 10000, 1000),
    ("XV", 256, 100000, 1000), ("XVI", 512, 0, 0), ("XVII", 1024, 0, 0),
]

CAL = CalibrationConstants(cpu_base_ms=1, cpu_ms_per_unit_prime=0.001, mem_overhead_mb=8)


def test_builtin_profiles_match_table_cell_for_cell():
    profiles = builtin_profiles()
    assert len(profiles) == 17
    got = [(p.id, p.bloat_mb, p.prime_n, p.sleep_ms) for p in profiles]
    assert got == TABLE


def test_named_rows():
    ps = builtin_profiles()
    assert (ps[6].bloat_mb, ps[6].prime_n, ps[6].sleep_ms) == (128, 10000, 1000)
    assert (ps[0].bloat_mb, ps[0].prime_n, ps[0].sleep_ms) == (0, 0, 0)
    assert (ps[9].bloat_mb, ps[9].prime_n, ps[9].sleep_ms) == (256, 1000, 0)
    assert get_profile("VII") == ps[6]


def test_unknown_profile():
    with pytest.raises(KeyError):
        get_profile("XVIII")


@pytest.mark.parametrize("params, expected", [
    ((0, 0, 0), (1, 8, 0)),
    ((128, 10000, 1000), (11, 136, 1000)),
    ((256, 100000, 0), (101, 264, 0)),
])
def test_service_demand_by_hand(params, expected):
    d = service_demand(WorkloadProfile("t", *params), CAL)
    assert d == ServiceDemand(*expected)


def test_negative_profile_rejected():
    with pytest.raises(ValueError):
        WorkloadProfile("bad", -1, 0, 0)


nonneg = st.floats(0, 1e6, allow_nan=False)


@given(nonneg, nonneg, nonneg, st.sampled_from([0, 1, 2]), st.floats(0, 1e5))
def test_demand_monotone_and_sleep_passthrough(b, p, s, which, bump):
    base = WorkloadProfile("a", b, p, s)
    raised = list((b, p, s))
    raised[which] += bump
    d0 = service_demand(base, CAL)
    d1 = service_demand(WorkloadProfile("b", *raised), CAL)
    assert d1.cpu_ms >= d0.cpu_ms and d1.mem_mb >= d0.mem_mb and d1.wait_ms >= d0.wait_ms
    assert d0.wait_ms == s
    assert min(d0.cpu_ms, d0.mem_mb, d0.wait_ms) >= 0
    assert service_demand(base, CAL) == d0
