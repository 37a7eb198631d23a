"""Q-learning on a deterministic 3-state chain, checked against value iteration.

The chain lives on the agent's own concurrency grid (10, 30, 50) so the
package's action restriction and update code are exercised unchanged. Staying
at 10 pays 0.8 per step, crossing 30 pays nothing, and 50 pays 1.0, so the
myopic choice at 10 (stay) is not the optimal one (move right).
"""

import time

import numpy as np

from kpasim.agent import AgentState, Hyperparams, QTable, greedy_action, q_update, select_action, valid_actions

GRID = (10, 30, 50)
HP = Hyperparams(conc_min=10, conc_max=50, n_bins=1)
PAYOFF = {10: 0.8, 30: 0.0, 50: 1.0}


def step(conc, delta):
    nxt = conc + delta
    return nxt, PAYOFF[nxt]


def value_iteration_policy(gamma=0.9, tol=1e-12):
    # deliberately independent of the agent module: plain arrays, own action rules
    n = len(GRID)
    moves = {0: (0, 1), 1: (-1, 0, 1), 2: (-1, 0)}
    rew = np.array([PAYOFF[c] for c in GRID])
    v = np.zeros(n)
    while True:
        new = np.array([max(rew[i + m] + gamma * v[i + m] for m in moves[i]) for i in range(n)])
        if np.max(np.abs(new - v)) < tol:
            break
        v = new
    policy = {}
    for i in range(n):
        vals = [(rew[i + m] + gamma * v[i + m], m) for m in moves[i]]
        policy[GRID[i]] = 20 * max(vals)[1]
    return policy


def test_oracle_prefers_long_term_payoff():
    assert value_iteration_policy() == {10: 20, 30: 20, 50: 0}


def test_q_learning_matches_value_iteration():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    q = QTable()
    s = AgentState(10, 0, 0)
    for i in range(5000):
        if i % 25 == 0:  # restart episodes from a random state for coverage
            s = AgentState(int(rng.choice(GRID)), 0, 0)
        a = select_action(q, s, 0.3, rng, HP)
        nxt, r = step(s.conc, a)
        s_next = AgentState(nxt, 0, 0)
        q_update(q, s, a, r, s_next, HP)
        s = s_next
    learned = {c: greedy_action(q, AgentState(c, 0, 0), HP) for c in GRID}
    assert learned == value_iteration_policy()
    assert time.perf_counter() - t0 < 1.0


def test_chain_actions_match_grid_edges():
    assert valid_actions(AgentState(10, 0, 0), HP) == (0, 20)
    assert valid_actions(AgentState(50, 0, 0), HP) == (-20, 0)
