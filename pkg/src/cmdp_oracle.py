"""
Oracle exact pour les petits CMDP discrets.

- Évaluation de politique par résolution linéaire
- Itération sur les valeurs (optimum non contraint)
- Énumération des politiques déterministes
- Programme linéaire sur les mesures d'occupation (scipy / HiGHS), qui
  trouve l'optimum contraint parmi les politiques stochastiques
"""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from scipy.optimize import linprog

from src.cmdp_env import DiscreteCmdp


logger = logging.getLogger(__name__)

FEASIBILITY_TOLERANCE = 1e-9
MAX_ENUMERATED_POLICIES = 1_000_000
ORACLE_METHODS = ("auto", "enumerate", "lp")


@dataclass(frozen=True, eq=False)
class OracleResult:
    """Meilleure politique faisable (ou constat d'infaisabilité)."""

    feasible: bool
    reward_return: float
    cost_return: float
    policy: Optional[np.ndarray]
    method: str


def policy_evaluation(cmdp: DiscreteCmdp, policy: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Valeurs exactes (V^R, V^C) par état d'une politique stochastique (S, A).

    Résout (I - γ P_π) V = x_π pour chaque canal.
    """
    policy = np.asarray(policy, dtype=np.float64)
    if policy.shape != (cmdp.n_states, cmdp.n_actions):
        raise ValueError(f"politique de forme {policy.shape}, {(cmdp.n_states, cmdp.n_actions)} attendue")
    p_pi = np.einsum("sa,sak->sk", policy, cmdp.transitions)
    system = np.eye(cmdp.n_states) - cmdp.gamma * p_pi
    r_pi = np.sum(policy * cmdp.expected(cmdp.rewards), axis=1)
    c_pi = np.sum(policy * cmdp.expected(cmdp.costs), axis=1)
    return np.linalg.solve(system, r_pi), np.linalg.solve(system, c_pi)


def evaluate_policy(cmdp: DiscreteCmdp, policy: np.ndarray) -> Tuple[float, float]:
    """(J^R, J^C) depuis l'état initial."""
    v_r, v_c = policy_evaluation(cmdp, policy)
    return float(v_r[cmdp.initial_state]), float(v_c[cmdp.initial_state])


def value_iteration(cmdp: DiscreteCmdp, tol: float = 1e-12, max_iter: int = 100_000) -> Tuple[np.ndarray, np.ndarray]:
    """
    Optimum non contraint de la récompense.

    Returns:
        Tuple (V* par état, politique gloutonne déterministe (S, A))
    """
    r_bar = cmdp.expected(cmdp.rewards)
    v = np.zeros(cmdp.n_states)
    for _ in range(max_iter):
        q = r_bar + cmdp.gamma * np.einsum("sak,k->sa", cmdp.transitions, v)
        v_next = q.max(axis=1)
        if np.max(np.abs(v_next - v)) < tol:
            v = v_next
            break
        v = v_next
    q = r_bar + cmdp.gamma * np.einsum("sak,k->sa", cmdp.transitions, v)
    greedy = np.zeros((cmdp.n_states, cmdp.n_actions))
    greedy[np.arange(cmdp.n_states), q.argmax(axis=1)] = 1.0
    return v, greedy


def enumerate_deterministic(cmdp: DiscreteCmdp, d: float) -> OracleResult:
    """Meilleure politique déterministe faisable, par énumération des |A|^|S| candidates."""
    best: Optional[OracleResult] = None
    for choice in itertools.product(range(cmdp.n_actions), repeat=cmdp.n_states):
        policy = np.zeros((cmdp.n_states, cmdp.n_actions))
        policy[np.arange(cmdp.n_states), choice] = 1.0
        j_r, j_c = evaluate_policy(cmdp, policy)
        if j_c > d + FEASIBILITY_TOLERANCE:
            continue
        if best is None or j_r > best.reward_return:
            best = OracleResult(True, j_r, j_c, policy, "enumerate")
    if best is None:
        return OracleResult(False, math.nan, math.nan, None, "enumerate")
    return best


def occupancy_lp(cmdp: DiscreteCmdp, d: float) -> OracleResult:
    """
    Programme linéaire sur la mesure d'occupation actualisée x(s, a).

    max Σ x(s,a) r̄(s,a)
    s.c. Σ_a x(s',a) - γ Σ_{s,a} P(s'|s,a) x(s,a) = μ(s')
         Σ x(s,a) c̄(s,a) <= d   (omise si d est infini)
         x >= 0
    """
    n_s, n_a = cmdp.n_states, cmdp.n_actions
    r_bar = cmdp.expected(cmdp.rewards).ravel()
    c_bar = cmdp.expected(cmdp.costs).ravel()

    a_eq = np.zeros((n_s, n_s * n_a))
    for s in range(n_s):
        for a in range(n_a):
            col = s * n_a + a
            a_eq[s, col] += 1.0
            a_eq[:, col] -= cmdp.gamma * cmdp.transitions[s, a]
    b_eq = np.zeros(n_s)
    b_eq[cmdp.initial_state] = 1.0

    a_ub, b_ub = None, None
    if math.isfinite(d):
        a_ub = c_bar[None, :]
        b_ub = np.array([d])

    res = linprog(-r_bar, A_ub=a_ub, b_ub=b_ub, A_eq=a_eq, b_eq=b_eq, bounds=(0, None), method="highs")
    if res.status == 2:
        return OracleResult(False, math.nan, math.nan, None, "lp")
    if res.status != 0:
        raise RuntimeError(f"échec du programme linéaire: {res.message}")

    occupancy = np.maximum(res.x.reshape(n_s, n_a), 0.0)
    mass = occupancy.sum(axis=1, keepdims=True)
    policy = np.where(mass > 1e-12, occupancy / np.where(mass > 1e-12, mass, 1.0), 1.0 / n_a)
    j_r, j_c = evaluate_policy(cmdp, policy)
    return OracleResult(j_c <= d + FEASIBILITY_TOLERANCE, j_r, j_c, policy, "lp")


def oracle_solve(cmdp: DiscreteCmdp, d: float, method: str = "auto") -> OracleResult:
    """
    Optimum contraint exact d'un CMDP discret.

    Args:
        cmdp: CMDP tabulaire
        d: Seuil de coût (math.inf pour le problème non contraint)
        method: "enumerate" (politiques déterministes), "lp" (mesures d'occupation),
                "auto" (énumération puis raffinement par le LP si strictement meilleur)

    Returns:
        OracleResult ; feasible=False si aucune politique ne respecte d
    """
    if method not in ORACLE_METHODS:
        raise ValueError(f"méthode inconnue: {method} (attendu: {ORACLE_METHODS})")
    if method == "lp":
        return occupancy_lp(cmdp, d)

    n_candidates = cmdp.n_actions ** cmdp.n_states
    if n_candidates > MAX_ENUMERATED_POLICIES:
        if method == "enumerate":
            raise ValueError(f"{n_candidates} politiques déterministes, énumération impossible")
        return occupancy_lp(cmdp, d)

    deterministic = enumerate_deterministic(cmdp, d)
    if method == "enumerate":
        return deterministic

    mixed = occupancy_lp(cmdp, d)
    if mixed.feasible and (not deterministic.feasible or mixed.reward_return > deterministic.reward_return + FEASIBILITY_TOLERANCE):
        logger.debug(f"Politique mixte retenue: J^R={mixed.reward_return:.6f} > {deterministic.reward_return:.6f}")
        return mixed
    return deterministic
