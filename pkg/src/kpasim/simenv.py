"""Discrete-event model of the Knative serving data path.

Requests flow ingress -> (activator buffer while no pod is ready) -> queue-proxy
admission gated by the concurrency limit -> user-container. Inside a pod CPU
is processor-shared across the requests in their CPU phase; after the CPU
phase a request sleeps for its wait time while still holding its slot and its
memory. A request that would push a pod past its memory capacity is rejected;
with ``oom_kill`` (the default) the pod is also killed, failing everything it
holds, and restarts after a crash-loop backoff. A KPA-like autoscaler
re-evaluates the pod count every ``scale_interval_ms`` from the time-averaged
concurrency of the previous interval.

Times are integer microseconds internally; ties break on insertion sequence.
"""

from __future__ import annotations

import heapq
import math
from collections import deque
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from kpasim.workload import ServiceDemand

US_PER_MS = 1000
MIN_LIMIT, MAX_LIMIT = 1, 1000


@dataclass(frozen=True)
class SimConfig:
    pod_cpu_cores: float = 1.0
    pod_mem_mb: float = 7168.0
    pod_idle_mem_mb: float = 32.0
    cold_start_ms: float = 2000.0
    cold_start_jitter: float = 0.25  # extra delay, uniform in [0, j) * cold_start_ms
    pod_speed_jitter: float = 0.1  # pod core speed drawn from [1 - j, 1]
    max_pods: int = 20
    scale_interval_ms: float = 2000.0
    target_percentage: float = 1.0
    scale_to_zero: bool = True
    request_timeout_ms: float = 30000.0
    oom_kill: bool = True  # over-capacity admission restarts the user-container
    oom_restart_ms: float = 10000.0  # first restart delay, doubled per crash
    oom_backoff_cap_ms: float = 300000.0
    arrivals: str = "constant"  # or "poisson"
    rng_seed: int = 0
    debug: bool = False
    trace: bool = False

    def __post_init__(self):
        if self.pod_cpu_cores <= 0:
            raise ValueError("pod_cpu_cores must be > 0")
        if self.pod_mem_mb <= 0:
            raise ValueError("pod_mem_mb must be > 0")
        if not 0 <= self.pod_idle_mem_mb < self.pod_mem_mb:
            raise ValueError("pod_idle_mem_mb must be in [0, pod_mem_mb)")
        if self.cold_start_ms < 0:
            raise ValueError("cold_start_ms must be >= 0")
        if not 0 <= self.cold_start_jitter < 1:
            raise ValueError("cold_start_jitter must be in [0, 1)")
        if not 0 <= self.pod_speed_jitter < 1:
            raise ValueError("pod_speed_jitter must be in [0, 1)")
        if self.max_pods < 1:
            raise ValueError("max_pods must be >= 1")
        if self.scale_interval_ms <= 0:
            raise ValueError("scale_interval_ms must be > 0")
        if not 0 < self.target_percentage <= 1:
            raise ValueError("target_percentage must be in (0, 1]")
        if self.oom_restart_ms < 0 or self.oom_backoff_cap_ms < self.oom_restart_ms:
            raise ValueError("need 0 <= oom_restart_ms <= oom_backoff_cap_ms")
        if self.request_timeout_ms <= 0:
            raise ValueError("request_timeout_ms must be > 0")
        if self.arrivals not in ("constant", "poisson"):
            raise ValueError(f"arrivals must be 'constant' or 'poisson', got {self.arrivals!r}")


class Phase(Enum):
    STARTING = "starting"
    READY = "ready"
    TERMINATING = "terminating"


@dataclass
class Request:
    id: int
    issued_us: int
    pod: "PodState | None" = None
    finish_work: float = 0.0  # pod virtual-work value at which the CPU phase ends
    in_cpu: bool = False
    resolved: bool = False
    via_activator: bool = False
    latency_us: int | None = None


@dataclass
class PodState:
    id: int
    phase: Phase
    ready_at_us: int
    speed: float = 1.0
    in_flight: dict = field(default_factory=dict)
    mem_used_mb: float = 0.0
    # processor sharing bookkeeping
    work: float = 0.0
    last_us: int = 0
    n_cpu: int = 0
    cpu_heap: list = field(default_factory=list)
    version: int = 0
    crashes: int = 0

    @property
    def ready_at_ms(self) -> float:
        return self.ready_at_us / US_PER_MS


@dataclass(frozen=True)
class ResourceSnapshot:
    avg_cpu_util: float = 0.0
    avg_mem_util: float = 0.0


@dataclass(frozen=True)
class LoadTestReport:
    throughput_rps: float
    mean_latency_ms: float
    p95_latency_ms: float
    success_ratio: float
    issued: int
    succeeded: int
    failed: int
    rejected_memory: int
    timed_out: int
    oom_kills: int
    via_activator: int
    window_ms: float
    min_latency_ms: float
    max_latency_ms: float
    first_latency_ms: float
    max_pods_seen: int
    resources: ResourceSnapshot


# event kinds
_ARRIVAL, _POD_READY, _CPU_DONE, _WAIT_DONE, _TIMEOUT, _TICK, _WINDOW_END = range(7)
_KIND_NAMES = ("arrival", "pod_ready", "cpu_done", "wait_done", "timeout", "scale_tick", "window_end")


class SimEnv:
    """Mutable cluster state. One instance is owned by one worker at a time."""

    def __init__(self, config: SimConfig | None = None):
        self.config = config or SimConfig()
        reset(self)

    # -- event queue -------------------------------------------------------

    def _push(self, t_us: int, kind: int, payload=None):
        if t_us < self.clock_us:
            raise AssertionError(f"event scheduled in the past: {t_us} < {self.clock_us}")
        heapq.heappush(self.event_queue, (t_us, self._seq, kind, payload))
        self._seq += 1

    @property
    def clock_ms(self) -> float:
        return self.clock_us / US_PER_MS

    @property
    def activator_buffer(self):
        return self._buffer

    # -- pods ---------------------------------------------------------------

    def _live_pods(self):
        return [p for p in self.pods if p.phase is not Phase.TERMINATING]

    def _ready_pods(self):
        return [p for p in self.pods if p.phase is Phase.READY]

    def _start_pod(self):
        cfg = self.config
        jitter = 1.0 + cfg.cold_start_jitter * self.rng.random()
        delay = int(round(cfg.cold_start_ms * jitter * US_PER_MS))
        speed = 1.0 - cfg.pod_speed_jitter * self.rng.random()
        pod = PodState(self._next_pod_id, Phase.STARTING, self.clock_us + delay, speed=speed,
                       mem_used_mb=cfg.pod_idle_mem_mb)
        self._next_pod_id += 1
        self.pods.append(pod)
        self._push(pod.ready_at_us, _POD_READY, pod)
        return pod

    def _cpu_rate(self, pod: PodState) -> float:
        if pod.n_cpu == 0:
            return 0.0
        return pod.speed * min(1.0, self.config.pod_cpu_cores / pod.n_cpu)

    def _advance_pod(self, pod: PodState):
        dt = self.clock_us - pod.last_us
        if dt > 0 and pod.n_cpu:
            pod.work += dt * self._cpu_rate(pod)
        pod.last_us = self.clock_us

    def _reschedule_cpu(self, pod: PodState):
        pod.version += 1
        heap = pod.cpu_heap
        while heap and not _live_cpu(heap[0][2], pod):
            heapq.heappop(heap)
        if not heap:
            return
        remaining = max(0.0, heap[0][0] - pod.work)
        dt = math.ceil(remaining / self._cpu_rate(pod)) if remaining > 0 else 0
        self._push(self.clock_us + dt, _CPU_DONE, (pod, pod.version))

    # -- request lifecycle ------------------------------------------------

    def _admit(self, req: Request, pod: PodState):
        self._advance_pod(pod)
        pod.in_flight[req.id] = req
        pod.mem_used_mb += self._demand.mem_mb
        req.pod = pod
        cpu_us = self._demand.cpu_ms * US_PER_MS
        if cpu_us > 0:
            req.in_cpu = True
            req.finish_work = pod.work + cpu_us
            pod.n_cpu += 1
            heapq.heappush(pod.cpu_heap, (req.finish_work, req.id, req))
            self._reschedule_cpu(pod)
        else:
            self._enter_wait(req)

    def _enter_wait(self, req: Request):
        req.in_cpu = False
        wait_us = int(round(self._demand.wait_ms * US_PER_MS))
        if wait_us > 0:
            self._push(self.clock_us + wait_us, _WAIT_DONE, req)
        else:
            self._succeed(req)

    def _release(self, req: Request):
        pod = req.pod
        if pod is None:
            return
        self._advance_pod(pod)
        del pod.in_flight[req.id]
        pod.mem_used_mb -= self._demand.mem_mb
        if req.in_cpu:
            req.in_cpu = False
            pod.n_cpu -= 1
            self._reschedule_cpu(pod)
        req.pod = None
        if pod.phase is Phase.TERMINATING and not pod.in_flight:
            self.pods.remove(pod)

    def _succeed(self, req: Request):
        self._release(req)
        req.resolved = True
        self._unresolved -= 1
        req.latency_us = self.clock_us - req.issued_us
        self._latencies.append(req.latency_us)
        self._last_resolution_us = self.clock_us

    def _fail(self, req: Request, reason: str):
        self._release(req)
        req.resolved = True
        self._unresolved -= 1
        if reason == "memory":
            self._rejected_memory += 1
        else:
            self._timed_out += 1
        self._last_resolution_us = self.clock_us

    def _dispatch(self):
        limit = self._limit
        cap = self.config.pod_mem_mb
        while self._buffer:
            candidates = [p for p in self.pods if p.phase is Phase.READY and len(p.in_flight) < limit]
            if not candidates:
                return
            pod = min(candidates, key=lambda p: (len(p.in_flight), p.id))
            req = self._buffer.popleft()
            if req.resolved:
                continue
            self._buffered -= 1
            if pod.mem_used_mb + self._demand.mem_mb > cap + 1e-9:
                self._fail(req, "memory")
                if self.config.oom_kill:
                    self._oom_restart(pod)
                continue
            self._admit(req, pod)

    def _oom_restart(self, pod: PodState):
        for req in list(pod.in_flight.values()):
            self._fail(req, "memory")
        pod.cpu_heap.clear()
        pod.n_cpu = 0
        pod.work = 0.0
        pod.version += 1
        pod.mem_used_mb = self.config.pod_idle_mem_mb
        if pod.phase is Phase.TERMINATING:
            self.pods.remove(pod)
            return
        pod.phase = Phase.STARTING
        pod.crashes += 1
        backoff = min(self.config.oom_backoff_cap_ms, self.config.oom_restart_ms * 2 ** (pod.crashes - 1))
        pod.ready_at_us = self.clock_us + int(round(backoff * US_PER_MS))
        self._oom_kills += 1
        self._push(pod.ready_at_us, _POD_READY, pod)

    # -- autoscaler ---------------------------------------------------------

    def _scale_to(self, desired: int):
        live = self._live_pods()
        if desired > len(live):
            # draining pods still occupy cluster slots
            free = self.config.max_pods - len(self.pods)
            for _ in range(min(desired - len(live), free)):
                self._start_pod()
        elif desired < len(live) and self._buffered == 0:
            surplus = len(live) - desired
            order = sorted(live, key=lambda p: (p.phase is Phase.READY, len(p.in_flight), -p.id))
            for pod in order[:surplus]:
                pod.phase = Phase.TERMINATING
                if not pod.in_flight:
                    self.pods.remove(pod)

    def _on_tick(self):
        cfg = self.config
        span = self.clock_us - self._tick_mark_us
        observed = self._conc_area / span if span > 0 else float(self._concurrency())
        self._conc_area = 0.0
        self._tick_mark_us = self.clock_us
        want = desired_pods(observed, self._target, cfg.target_percentage,
                            max_pods=cfg.max_pods, scale_to_zero=cfg.scale_to_zero)
        if self._buffered and want == 0:
            want = 1
        self._scale_to(want)
        if self._unresolved or self._arrivals_left:
            self._push(self.clock_us + int(cfg.scale_interval_ms * US_PER_MS), _TICK, self._generation)

    def _concurrency(self) -> int:
        return self._buffered + sum(len(p.in_flight) for p in self.pods)

    # -- accounting -----------------------------------------------------------

    def _accumulate(self, t_us: int):
        dt = t_us - self.clock_us
        if dt <= 0:
            return
        cores = self.config.pod_cpu_cores
        cap = self.config.pod_mem_mb
        ready = busy = mem = 0.0
        for p in self.pods:
            if p.phase is Phase.STARTING:
                continue
            ready += 1
            busy += min(p.n_cpu, cores) / cores
            mem += p.mem_used_mb / cap
        self._ready_area += dt * ready
        self._busy_area += dt * busy
        self._mem_area += dt * mem
        self._conc_area += dt * self._concurrency()

    def _check_invariants(self):
        for p in self.pods:
            if len(p.in_flight) > self._limit:
                raise AssertionError(f"pod {p.id} holds {len(p.in_flight)} > limit {self._limit}")
            if p.mem_used_mb > self.config.pod_mem_mb + 1e-6:
                raise AssertionError(f"pod {p.id} memory {p.mem_used_mb} exceeds capacity")
            if p.phase is Phase.STARTING and p.in_flight:
                raise AssertionError(f"starting pod {p.id} holds requests")

    # -- main loop -------------------------------------------------------------

    def _handle(self, kind: int, payload):
        cfg = self.config
        if kind == _ARRIVAL:
            req = payload
            self._arrivals_left -= 1
            if not self._ready_pods():
                req.via_activator = True
                if not self._live_pods():
                    self._scale_to(1)  # activator pokes the autoscaler
            self._buffer.append(req)
            self._buffered += 1
            self._push(req.issued_us + int(cfg.request_timeout_ms * US_PER_MS), _TIMEOUT, req)
            self._dispatch()
        elif kind == _POD_READY:
            pod = payload
            if pod in self.pods and pod.phase is Phase.STARTING:
                pod.phase = Phase.READY
                pod.last_us = self.clock_us
                self._dispatch()
        elif kind == _CPU_DONE:
            pod, version = payload
            if version != pod.version:
                return
            self._advance_pod(pod)
            done = []
            heap = pod.cpu_heap
            while heap and (not _live_cpu(heap[0][2], pod) or heap[0][0] <= pod.work + 1e-6):
                _, _, req = heapq.heappop(heap)
                if _live_cpu(req, pod):
                    done.append(req)
            for req in done:
                req.in_cpu = False
                pod.n_cpu -= 1
            self._reschedule_cpu(pod)
            for req in done:
                self._enter_wait(req)
            self._dispatch()
        elif kind == _WAIT_DONE:
            req = payload
            if not req.resolved:
                self._succeed(req)
                self._dispatch()
        elif kind == _TIMEOUT:
            req = payload
            if not req.resolved:
                in_buffer = req.pod is None
                self._fail(req, "timeout")
                if in_buffer:
                    self._buffered -= 1  # entry is skipped lazily by _dispatch
                self._dispatch()
        elif kind == _TICK:
            if payload == self._generation:
                self._on_tick()
        elif kind == _WINDOW_END:
            self._window_open = False

    def _step(self) -> bool:
        t_us, _, kind, payload = heapq.heappop(self.event_queue)
        self._accumulate(t_us)
        self.clock_us = t_us
        if self._trace is not None:
            self._trace.append(_trace_row(t_us, kind, payload, self))
        self._handle(kind, payload)
        self._max_pods_seen = max(self._max_pods_seen, len(self._live_pods()))
        if self.config.debug:
            self._check_invariants()
        return True


def _live_cpu(req: Request, pod: PodState) -> bool:
    return req.in_cpu and req.pod is pod and not req.resolved


def _trace_row(t_us, kind, payload, env):
    row = {"t_us": t_us, "event": _KIND_NAMES[kind]}
    if isinstance(payload, Request):
        row["request"] = payload.id
    elif isinstance(payload, PodState):
        row["pod"] = payload.id
    elif isinstance(payload, tuple):
        row["pod"] = payload[0].id
    row["buffered"] = env._buffered
    row["pods"] = len(env._live_pods())
    return row


def reset(env: SimEnv, seed: int | None = None) -> SimEnv:
    """Return ``env`` to time zero. ``seed`` overrides ``config.rng_seed``."""
    cfg = env.config
    env.clock_us = 0
    env.pods = []
    env._buffer = deque()
    env._buffered = 0
    env.event_queue = []
    env._seq = 0
    env._next_pod_id = 0
    env.rng = np.random.default_rng(cfg.rng_seed if seed is None else seed)
    env._generation = 0
    env._window = None
    env._window_open = False
    env._snapshot = ResourceSnapshot(0.0, 0.0)
    env._trace = [] if cfg.trace else None
    _reset_counters(env)
    if not cfg.scale_to_zero:
        pod = PodState(0, Phase.READY, 0, speed=1.0, mem_used_mb=cfg.pod_idle_mem_mb)
        env._next_pod_id = 1
        env.pods.append(pod)
    return env


def _reset_counters(env: SimEnv):
    env._latencies = []
    env._unresolved = 0
    env._arrivals_left = 0
    env._rejected_memory = 0
    env._timed_out = 0
    env._oom_kills = 0
    env._last_resolution_us = env.clock_us
    env._ready_area = env._busy_area = env._mem_area = 0.0
    env._conc_area = 0.0
    env._tick_mark_us = env.clock_us
    env._max_pods_seen = len([p for p in env.pods if p.phase is not Phase.TERMINATING])


def desired_pods(observed_concurrency: float, limit: float, target_percentage: float,
                 max_pods: int | None = None, scale_to_zero: bool = True) -> int:
    """Pods needed to keep each pod at ``limit * target_percentage`` concurrency."""
    if limit <= 0:
        raise ValueError("limit must be positive")
    if not 0 < target_percentage <= 1:
        raise ValueError("target_percentage must be in (0, 1]")
    if observed_concurrency < 0:
        raise ValueError("observed concurrency must be non-negative")
    # round away float noise such as 500 / (100 * 0.7) = 7.142857000000001
    n = math.ceil(round(observed_concurrency / (limit * target_percentage), 9))
    n = max(n, 0 if scale_to_zero else 1)
    if max_pods is not None:
        n = min(n, max_pods)
    return n


def _arrival_times(env: SimEnv, rate_rps: float, duration_ms: float) -> list[int]:
    start = env.clock_us
    horizon = int(round(duration_ms * US_PER_MS))
    if env.config.arrivals == "constant":
        n = int(math.floor(rate_rps * duration_ms / 1000 + 1e-9))
        gap = 1e6 / rate_rps
        return [start + int(round(i * gap)) for i in range(n)]
    # the attack opens with a request, then exponential gaps
    times = [start]
    t = 0.0
    while True:
        t += env.rng.exponential(1e6 / rate_rps)
        if t >= horizon:
            return times
        times.append(start + int(round(t)))


def run_load_test(env: SimEnv, concurrency_limit: int, demand: ServiceDemand, rate_rps: float,
                  duration_ms: float, target: float | None = None) -> LoadTestReport:
    """Fire ``rate_rps`` requests per second for ``duration_ms`` and wait for every response.

    ``target`` is the per-pod soft concurrency the autoscaler aims for; it
    defaults to the hard ``concurrency_limit``.
    """
    if not isinstance(concurrency_limit, (int, np.integer)) or not MIN_LIMIT <= concurrency_limit <= MAX_LIMIT:
        raise ValueError(f"concurrency_limit must be an integer in [{MIN_LIMIT}, {MAX_LIMIT}], got {concurrency_limit!r}")
    if not rate_rps > 0:
        raise ValueError("rate_rps must be positive")
    if not duration_ms > 0:
        raise ValueError("duration_ms must be positive")
    if target is not None and not target > 0:
        raise ValueError("target must be positive")

    env._limit = int(concurrency_limit)
    env._target = float(target if target is not None else concurrency_limit)
    env._demand = demand
    env._generation += 1
    _reset_counters(env)
    start = env.clock_us

    times = _arrival_times(env, rate_rps, duration_ms)
    if not times:
        raise ValueError("rate and duration issue no requests")
    reqs = [Request(i, t) for i, t in enumerate(times)]
    for r in reqs:
        env._push(r.issued_us, _ARRIVAL, r)
    env._arrivals_left = len(reqs)
    env._unresolved = len(reqs)
    env._push(start, _TICK, env._generation)
    # utilisation is averaged over at least the nominal test duration
    env._window_open = True
    env._push(start + int(round(duration_ms * US_PER_MS)), _WINDOW_END)

    while env._unresolved or env._arrivals_left or env._window_open:
        env._step()
    # drop this test's pending autoscaler ticks
    env.event_queue = [e for e in env.event_queue if e[2] != _TICK]
    heapq.heapify(env.event_queue)

    end = env.clock_us
    env._window = (start, end)
    env._snapshot = _snapshot_from_areas(env)

    issued = len(reqs)
    lat = np.asarray(env._latencies, dtype=np.float64) / US_PER_MS
    succeeded = len(lat)
    failed = issued - succeeded
    window_ms = max(float(duration_ms), (env._last_resolution_us - start) / US_PER_MS)
    if succeeded:
        mean_lat = float(lat.mean())
        p95 = float(np.percentile(lat, 95))
        lo, hi = float(lat.min()), float(lat.max())
    else:
        mean_lat = p95 = lo = hi = float(env.config.request_timeout_ms)
    first = reqs[0]
    first_latency = first.latency_us / US_PER_MS if first.latency_us is not None else float("nan")
    return LoadTestReport(
        throughput_rps=succeeded / (window_ms / 1000.0),
        mean_latency_ms=mean_lat,
        p95_latency_ms=p95,
        success_ratio=succeeded / issued,
        issued=issued,
        succeeded=succeeded,
        failed=failed,
        rejected_memory=env._rejected_memory,
        timed_out=env._timed_out,
        oom_kills=env._oom_kills,
        via_activator=sum(r.via_activator for r in reqs),
        window_ms=window_ms,
        min_latency_ms=lo,
        max_latency_ms=hi,
        first_latency_ms=first_latency,
        max_pods_seen=env._max_pods_seen,
        resources=env._snapshot,
    )


def _snapshot_from_areas(env: SimEnv) -> ResourceSnapshot:
    if env._ready_area <= 0:
        return ResourceSnapshot(0.0, 0.0)
    cpu = min(1.0, max(0.0, env._busy_area / env._ready_area))
    mem = min(1.0, max(0.0, env._mem_area / env._ready_area))
    return ResourceSnapshot(cpu, mem)


def resource_snapshot(env: SimEnv) -> ResourceSnapshot:
    """Time-weighted CPU and memory utilisation per ready pod over the last test window."""
    return env._snapshot


def trace_rows(env: SimEnv) -> list[dict]:
    return list(env._trace or [])


def with_seed(config: SimConfig, seed: int) -> SimConfig:
    return replace(config, rng_seed=seed)
