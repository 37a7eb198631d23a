"""Tabular Q-learning over (concurrency limit, cpu bin, mem bin) states.

Actions change the concurrency limit by -20, 0 or +20. At the ends of the
concurrency grid the non-executable action is removed from the action set.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, replace
from pathlib import Path
from typing import NamedTuple

import numpy as np

Action = int
ACTIONS: tuple[Action, ...] = (-20, 0, 20)  # also the argmax tie-break order
QTABLE_MAGIC = "kpasim-qtable"
QTABLE_VERSION = 1


class AgentState(NamedTuple):
    conc: int
    cpu_bin: int
    mem_bin: int


@dataclass(frozen=True)
class Hyperparams:
    alpha: float = 0.5
    gamma: float = 0.9
    epsilon_start: float = 1.0
    epsilon_decay: float = 0.995
    epsilon_min: float = 0.1
    exploration_start_iter: int = 50
    n_bins: int = 10
    conc_min: int = 10
    conc_max: int = 310
    conc_step: int = 20
    start_conc: int | None = None

    def __post_init__(self):
        if not 0 <= self.alpha <= 1:
            raise ValueError("alpha must be in [0, 1]")
        if not 0 <= self.gamma < 1:
            raise ValueError("gamma must be in [0, 1)")
        if not 0 <= self.epsilon_min <= self.epsilon_start <= 1:
            raise ValueError("need 0 <= epsilon_min <= epsilon_start <= 1")
        if not 0 < self.epsilon_decay <= 1:
            raise ValueError("epsilon_decay must be in (0, 1]")
        if self.exploration_start_iter < 0:
            raise ValueError("exploration_start_iter must be >= 0")
        if self.n_bins < 1:
            raise ValueError("n_bins must be >= 1")
        if self.conc_step != 20:
            raise ValueError("the action set moves the limit by 20, so conc_step must be 20")
        if self.conc_min < 1 or self.conc_min > self.conc_max:
            raise ValueError("need 1 <= conc_min <= conc_max")
        if (self.conc_max - self.conc_min) % self.conc_step:
            raise ValueError("conc_max - conc_min must be divisible by 20")
        if self.start_conc is not None and not self.on_grid(self.start_conc):
            raise ValueError(f"start_conc {self.start_conc} is not on the concurrency grid")

    def grid(self) -> list[int]:
        return list(range(self.conc_min, self.conc_max + 1, self.conc_step))

    def on_grid(self, conc: int) -> bool:
        return self.conc_min <= conc <= self.conc_max and (conc - self.conc_min) % self.conc_step == 0

    def initial_conc(self) -> int:
        if self.start_conc is not None:
            return self.start_conc
        # midpoint, halves round up to the next grid point
        steps = (self.conc_max - self.conc_min) / self.conc_step / 2
        return self.conc_min + self.conc_step * math.floor(steps + 0.5)


@dataclass(frozen=True)
class RewardConfig:
    tolerance: float = 0.05
    ref_value: float | None = None

    def __post_init__(self):
        if not 0 <= self.tolerance < 1:
            raise ValueError("tolerance must be in [0, 1)")
        if self.ref_value is not None and not self.ref_value > 0:
            raise ValueError("ref_value must be positive once set")


class QTable:
    """Sparse state-action values; anything never written reads as 0.0."""

    default = 0.0

    def __init__(self, values: dict | None = None):
        self._values: dict[tuple[AgentState, Action], float] = {}
        for (s, a), v in (values or {}).items():
            self[s, a] = v

    def __getitem__(self, key) -> float:
        s, a = key
        return self._values.get((AgentState(*s), a), self.default)

    def __setitem__(self, key, value: float):
        s, a = key
        if a not in ACTIONS:
            raise ValueError(f"unknown action {a!r}")
        value = float(value)
        if not math.isfinite(value):
            raise ValueError(f"Q-values must be finite, got {value}")
        self._values[(AgentState(*s), a)] = value

    def __contains__(self, key) -> bool:
        s, a = key
        return (AgentState(*s), a) in self._values

    def __len__(self) -> int:
        return len(self._values)

    def __eq__(self, other) -> bool:
        return isinstance(other, QTable) and self._values == other._values

    def items(self):
        return sorted(self._values.items())

    def copy(self) -> "QTable":
        q = QTable()
        q._values = dict(self._values)
        return q


def discretize(conc: int, cpu: float, mem: float, hp: Hyperparams = Hyperparams()) -> AgentState:
    if not hp.on_grid(conc):
        raise ValueError(f"concurrency {conc} is off the grid {hp.conc_min}..{hp.conc_max} step {hp.conc_step}")
    for name, x in (("cpu", cpu), ("mem", mem)):
        if not 0.0 <= x <= 1.0:
            raise ValueError(f"{name} utilisation must be in [0, 1], got {x}")
    n = hp.n_bins
    return AgentState(int(conc), min(int(math.floor(cpu * n)), n - 1), min(int(math.floor(mem * n)), n - 1))


def valid_actions(state: AgentState, hp: Hyperparams = Hyperparams()) -> tuple[Action, ...]:
    acts = ACTIONS
    if state.conc <= hp.conc_min:
        acts = tuple(a for a in acts if a >= 0)
    if state.conc >= hp.conc_max:
        acts = tuple(a for a in acts if a <= 0)
    return acts


def epsilon_at(iteration: int, hp: Hyperparams = Hyperparams()) -> float:
    if iteration < 0:
        raise ValueError("iteration must be non-negative")
    if iteration < hp.exploration_start_iter:
        return 1.0
    k = iteration - hp.exploration_start_iter
    return max(hp.epsilon_min, hp.epsilon_start * hp.epsilon_decay ** k)


def greedy_action(q: QTable, state: AgentState, hp: Hyperparams = Hyperparams()) -> Action:
    best, best_v = None, -math.inf
    for a in valid_actions(state, hp):
        v = q[state, a]
        if v > best_v:
            best, best_v = a, v
    return best


def select_action(q: QTable, state: AgentState, epsilon: float, rng: np.random.Generator,
                  hp: Hyperparams = Hyperparams()) -> Action:
    """Epsilon-greedy choice; ties in the greedy branch go to the first of (-20, 0, +20)."""
    acts = valid_actions(state, hp)
    if rng.random() < epsilon:
        return acts[int(rng.integers(len(acts)))]
    return greedy_action(q, state, hp)


def reward(throughput: float, rc: RewardConfig) -> float:
    if throughput < 0:
        raise ValueError(f"throughput must be non-negative, got {throughput}")
    if throughput == 0:
        return 0.0
    if rc.ref_value is None:
        raise ValueError("reward needs a reference value; call update_ref first")
    ref = rc.ref_value
    if throughput <= ref * (1 - rc.tolerance) or throughput >= ref * (1 + rc.tolerance):
        return throughput / ref
    return 1.0


def update_ref(rc: RewardConfig, throughput: float) -> RewardConfig:
    if not throughput > 0:
        return rc
    if rc.ref_value is None or throughput > rc.ref_value:
        return replace(rc, ref_value=float(throughput))
    return rc


def q_update(q: QTable, s: AgentState, a: Action, r: float, s_next: AgentState,
             hp: Hyperparams = Hyperparams()) -> float:
    """Apply one Q-learning backup in place and return the new Q(s, a)."""
    if a not in valid_actions(s, hp):
        raise ValueError(f"action {a} is not valid in state {s}")
    best_next = max(q[s_next, b] for b in valid_actions(s_next, hp))
    new = (1 - hp.alpha) * q[s, a] + hp.alpha * (r + hp.gamma * best_next)
    q[s, a] = new
    return new


# -- persistence ---------------------------------------------------------------

class QTableError(ValueError):
    pass


class QTableFormatError(QTableError):
    """Snapshot file is truncated or otherwise malformed."""


class QTableVersionError(QTableError):
    """Snapshot was written by an incompatible format version."""


_COLUMNS = "conc,cpu_bin,mem_bin,delta,value"


def save_qtable(q: QTable, path) -> None:
    path = Path(path)
    rows = q.items()
    lines = [f"# {QTABLE_MAGIC} v{QTABLE_VERSION}", f"# entries: {len(rows)}", _COLUMNS]
    for (s, a), v in rows:
        lines.append(f"{s.conc},{s.cpu_bin},{s.mem_bin},{a},{v!r}")
    lines.append("# end")
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text("\n".join(lines) + "\n")
    os.replace(tmp, path)


def load_qtable(path) -> QTable:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no Q-table snapshot at {path}")
    lines = path.read_text().splitlines()
    if not lines or not lines[0].startswith(f"# {QTABLE_MAGIC} v"):
        raise QTableFormatError(f"{path}: missing Q-table header")
    try:
        version = int(lines[0].rsplit("v", 1)[1])
    except ValueError:
        raise QTableFormatError(f"{path}: unreadable version in header {lines[0]!r}") from None
    if version != QTABLE_VERSION:
        raise QTableVersionError(f"{path}: format v{version}, this build reads v{QTABLE_VERSION}")
    if len(lines) < 4 or not lines[1].startswith("# entries: ") or lines[2] != _COLUMNS:
        raise QTableFormatError(f"{path}: malformed preamble")
    if lines[-1] != "# end":
        raise QTableFormatError(f"{path}: truncated (no end marker)")
    try:
        expected = int(lines[1].split(":", 1)[1])
    except ValueError:
        raise QTableFormatError(f"{path}: bad entry count") from None
    body = lines[3:-1]
    if len(body) != expected:
        raise QTableFormatError(f"{path}: expected {expected} entries, found {len(body)}")
    q = QTable()
    for lineno, line in enumerate(body, start=4):
        parts = line.split(",")
        if len(parts) != 5:
            raise QTableFormatError(f"{path}:{lineno}: expected 5 fields")
        try:
            conc, cb, mb, delta = (int(x) for x in parts[:4])
            q[AgentState(conc, cb, mb), delta] = float(parts[4])
        except ValueError as exc:
            raise QTableFormatError(f"{path}:{lineno}: {exc}") from None
    return q
