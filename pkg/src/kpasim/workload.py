"""Synthetic workload profiles and their mapping onto simulator demand.

A profile carries the three knobs of the sample application (``bloat`` MB of
memory, ``prime`` upper bound for CPU work, ``sleep`` milliseconds of idle
waiting). The simulator never executes them; it consumes the affine
:class:`ServiceDemand` derived from a profile and a set of calibration
constants.
"""

from __future__ import annotations

from dataclasses import dataclass

ROMAN = (
    "I", "II", "III", "IV", "V", "VI", "VII", "VIII", "IX",
    "X", "XI", "XII", "XIII", "XIV", "XV", "XVI", "XVII",
)

# (bloat MB, prime, sleep ms) for the 17 concurrency performance tests.
_TABLE = (
    (0, 0, 0),
    (128, 0, 0),
    (128, 1000, 0),
    (128, 10000, 0),
    (128, 100000, 0),
    (128, 1000, 1000),
    (128, 10000, 1000),
    (128, 100000, 1000),
    (256, 0, 0),
    (256, 1000, 0),
    (256, 10000, 0),
    (256, 100000, 0),
    (256, 1000, 1000),
    (256, 10000, 1000),
    (256, 100000, 1000),
    (512, 0, 0),
    (1024, 0, 0),
)


@dataclass(frozen=True)
class WorkloadProfile:
    id: str
    bloat_mb: float = 0
    prime_n: float = 0
    sleep_ms: float = 0

    def __post_init__(self):
        for name in ("bloat_mb", "prime_n", "sleep_ms"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative, got {getattr(self, name)}")


@dataclass(frozen=True)
class CalibrationConstants:
    cpu_base_ms: float = 1.0
    cpu_ms_per_unit_prime: float = 0.001
    mem_overhead_mb: float = 8.0

    def __post_init__(self):
        if self.cpu_ms_per_unit_prime <= 0:
            raise ValueError("cpu_ms_per_unit_prime must be positive")
        if self.mem_overhead_mb < 0 or self.cpu_base_ms < 0:
            raise ValueError("calibration offsets must be non-negative")


@dataclass(frozen=True)
class ServiceDemand:
    cpu_ms: float
    mem_mb: float
    wait_ms: float

    def __post_init__(self):
        if self.cpu_ms < 0 or self.mem_mb < 0 or self.wait_ms < 0:
            raise ValueError(f"demand fields must be non-negative: {self}")


def builtin_profiles() -> list[WorkloadProfile]:
    """The 17 benchmark profiles, ids "I" through "XVII"."""
    return [WorkloadProfile(rid, b, p, s) for rid, (b, p, s) in zip(ROMAN, _TABLE)]


def get_profile(profile_id: str) -> WorkloadProfile:
    key = str(profile_id).strip().upper()
    for p in builtin_profiles():
        if p.id == key:
            return p
    raise KeyError(f"unknown builtin profile {profile_id!r}; expected one of {', '.join(ROMAN)}")


def service_demand(profile: WorkloadProfile, calib: CalibrationConstants = CalibrationConstants()) -> ServiceDemand:
    return ServiceDemand(
        cpu_ms=calib.cpu_base_ms + calib.cpu_ms_per_unit_prime * profile.prime_n,
        mem_mb=calib.mem_overhead_mb + profile.bloat_mb,
        wait_ms=profile.sleep_ms,
    )
