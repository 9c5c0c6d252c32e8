"""
Environnements CMDP (processus de décision markoviens contraints).

Chaque environnement expose deux faces :
- un noyau fonctionnel pur (`sample_initial_state`, `transition`, `reward_fn`,
  `cost_fn`, `is_terminal`), utilisé par les rollouts réels et imaginaires
- une face gymnasium (`reset(seed=...)`, `step(action)`, coût dans `info["cost"]`)

Environnements fournis :
- HazardGoal2D : point matériel 2D, zones dangereuses circulaires, disque but
- CircleTrack : rouler sur un cercle à vitesse cible, coût hors de l'anneau
- DiscreteCmdpEnv : petit CMDP tabulaire, substrat de l'oracle exact
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import Any, Callable, Dict, Optional, Sequence, Tuple

import gymnasium as gym
import numpy as np
from gymnasium import spaces

from src.exceptions import InvalidActionError


logger = logging.getLogger(__name__)

ACTION_LOW = -1.0
ACTION_HIGH = 1.0


class Channel(str, Enum):
    """Canal de signal d'un épisode."""

    REWARD = "reward"
    COST = "cost"


@dataclass(frozen=True, eq=False)
class Transition:
    """Une transition (s, a, s', r, c) de l'environnement réel."""

    state: np.ndarray
    action: np.ndarray
    next_state: np.ndarray
    reward: float
    cost: float
    done: bool
    action_clipped: bool = False


@dataclass(frozen=True)
class CmdpSpec:
    """Dimensions, bornes d'action, horizon T et facteur d'actualisation γ."""

    obs_dim: int
    action_dim: int
    horizon: int
    gamma: float
    action_low: float = ACTION_LOW
    action_high: float = ACTION_HIGH

    def __post_init__(self) -> None:
        if self.obs_dim <= 0 or self.action_dim <= 0:
            raise ValueError(f"dimensions invalides: obs={self.obs_dim}, action={self.action_dim}")
        if self.horizon <= 0:
            raise ValueError(f"horizon doit être > 0, reçu {self.horizon}")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError(f"gamma doit être dans ]0, 1[, reçu {self.gamma}")
        if not self.action_low < self.action_high:
            raise ValueError("bornes d'action incohérentes")


class CmdpEnv(gym.Env):
    """
    Base commune des environnements contraints.

    L'état interne est l'observation elle-même (environnements entièrement
    observables), ce qui permet au modèle de dynamique de régresser s -> s'.
    Les fonctions de récompense et de coût acceptent des lots (axes de tête
    quelconques) pour évaluer les rollouts imaginaires.
    """

    metadata = {"render_modes": []}
    name = "cmdp"

    def __init__(self, obs_dim: int, action_dim: int, horizon: int, gamma: float) -> None:
        super().__init__()
        self.cmdp_spec = CmdpSpec(obs_dim=obs_dim, action_dim=action_dim, horizon=horizon, gamma=gamma)
        self.observation_space = spaces.Box(low=-np.inf, high=np.inf, shape=(obs_dim,), dtype=np.float64)
        self.action_space = spaces.Box(low=ACTION_LOW, high=ACTION_HIGH, shape=(action_dim,), dtype=np.float64)
        self._state: Optional[np.ndarray] = None
        self._t = 0

    # ------------------------------
    # Noyau fonctionnel
    # ------------------------------
    def sample_initial_state(self, rng: np.random.Generator) -> np.ndarray:
        raise NotImplementedError

    def transition(self, state: np.ndarray, action: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        raise NotImplementedError

    def reward_fn(self, state: np.ndarray, action: np.ndarray, next_state: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def cost_fn(self, state: np.ndarray, action: np.ndarray, next_state: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def is_terminal(self, state: np.ndarray) -> bool:
        return False

    def prepare_action(self, action: Any) -> Tuple[np.ndarray, bool]:
        """
        Valide et borne une action.

        Returns:
            Tuple (action bornée, True si un bornage a eu lieu)

        Raises:
            InvalidActionError: Si l'action contient une valeur non finie
        """
        raw = np.asarray(action, dtype=np.float64).reshape(self.cmdp_spec.action_dim)
        if not np.all(np.isfinite(raw)):
            raise InvalidActionError(f"action non finie: {raw.tolist()}")
        clipped = np.clip(raw, self.cmdp_spec.action_low, self.cmdp_spec.action_high)
        return clipped, bool(np.any(clipped != raw))

    def step_from(self, state: np.ndarray, action: Any, rng: np.random.Generator) -> Transition:
        """Une transition complète depuis `state`, sans toucher à l'état interne."""
        state = np.asarray(state, dtype=np.float64)
        act, was_clipped = self.prepare_action(action)
        next_state = self.transition(state, act, rng)
        return Transition(
            state=state,
            action=act,
            next_state=next_state,
            reward=float(self.reward_fn(state, act, next_state)),
            cost=float(self.cost_fn(state, act, next_state)),
            done=bool(self.is_terminal(next_state)),
            action_clipped=was_clipped,
        )

    # ------------------------------
    # Face gymnasium
    # ------------------------------
    def reset(self, *, seed: Optional[int] = None, options: Optional[dict] = None) -> Tuple[np.ndarray, dict]:
        super().reset(seed=seed)
        self._state = self.sample_initial_state(self.np_random)
        self._t = 0
        return self._state.copy(), {}

    def step(self, action: Any) -> Tuple[np.ndarray, float, bool, bool, dict]:
        if self._state is None:
            raise RuntimeError("reset() doit être appelé avant step()")
        tr = self.step_from(self._state, action, self.np_random)
        self._state = tr.next_state
        self._t += 1
        truncated = self._t >= self.cmdp_spec.horizon and not tr.done
        info = {"cost": tr.cost, "action_clipped": tr.action_clipped}
        return tr.next_state.copy(), tr.reward, tr.done, truncated, info


# -------------------------------------------------------------------------
# HazardGoal2D
# -------------------------------------------------------------------------
class HazardGoal2D(CmdpEnv):
    """
    Navigation d'un point matériel vers un disque but en évitant des zones dangereuses.

    Observation : [x, y, vx, vy, gx - x, gy - y, lidar(8)] où chaque case du
    pseudo-lidar vaut max(0, 1 - distance / portée) pour le danger le plus
    proche dans son secteur angulaire.

    Dynamique : v' = 0.5 v + 0.5 a v_max, p' = p + dt v', position bornée à l'arène.
    Récompense : κ (distance précédente - distance courante) + bonus à l'arrivée.
    Coût : 1 si la position suivante est dans une zone dangereuse.
    """

    name = "hazard_goal_2d"
    LIDAR_BINS = 8

    def __init__(
        self,
        horizon: int = 200,
        gamma: float = 0.99,
        layout_seed: int = 0,
        n_hazards: Optional[int] = None,
        hazard_radius: float = 0.2,
        goal_radius: float = 0.25,
        arena: float = 1.5,
        dt: float = 0.1,
        max_speed: float = 1.0,
        progress_scale: float = 1.0,
        goal_bonus: float = 1.0,
        lidar_range: float = 1.0,
    ) -> None:
        super().__init__(obs_dim=6 + self.LIDAR_BINS, action_dim=2, horizon=horizon, gamma=gamma)
        self.hazard_radius = hazard_radius
        self.goal_radius = goal_radius
        self.arena = arena
        self.dt = dt
        self.max_speed = max_speed
        self.progress_scale = progress_scale
        self.goal_bonus = goal_bonus
        self.lidar_range = lidar_range
        self.layout_seed = layout_seed

        layout_rng = np.random.default_rng(layout_seed)
        if n_hazards is None:
            n_hazards = int(layout_rng.integers(8, 13))
        margin = arena - 0.3
        self.goal = layout_rng.uniform(-margin, margin, size=2)
        hazards = []
        while len(hazards) < n_hazards:
            candidate = layout_rng.uniform(-arena, arena, size=2)
            if np.linalg.norm(candidate - self.goal) > goal_radius + hazard_radius + 0.1:
                hazards.append(candidate)
        self.hazards = np.asarray(hazards)
        logger.debug(f"Disposition {self.name} (graine {layout_seed}): {n_hazards} dangers, but en {self.goal.round(3)}")

    def observe(self, position: Sequence[float], velocity: Sequence[float] = (0.0, 0.0)) -> np.ndarray:
        """Construit le vecteur d'observation d'un agent en `position`."""
        p = np.asarray(position, dtype=np.float64)
        v = np.asarray(velocity, dtype=np.float64)
        return np.concatenate([p, v, self.goal - p, self._lidar(p)])

    def _lidar(self, position: np.ndarray) -> np.ndarray:
        reading = np.zeros(self.LIDAR_BINS)
        offsets = self.hazards - position
        dists = np.linalg.norm(offsets, axis=1)
        angles = np.mod(np.arctan2(offsets[:, 1], offsets[:, 0]), 2.0 * math.pi)
        bins = np.minimum((angles / (2.0 * math.pi / self.LIDAR_BINS)).astype(int), self.LIDAR_BINS - 1)
        closeness = np.maximum(0.0, 1.0 - dists / self.lidar_range)
        np.maximum.at(reading, bins, closeness)
        return reading

    def _in_hazard(self, positions: np.ndarray) -> np.ndarray:
        diff = positions[..., None, :] - self.hazards
        return np.any(np.linalg.norm(diff, axis=-1) <= self.hazard_radius, axis=-1)

    def _goal_distance(self, positions: np.ndarray) -> np.ndarray:
        return np.linalg.norm(positions - self.goal, axis=-1)

    def sample_initial_state(self, rng: np.random.Generator) -> np.ndarray:
        bound = 0.9 * self.arena
        for _ in range(10_000):
            p = rng.uniform(-bound, bound, size=2)
            if not self._in_hazard(p) and self._goal_distance(p) > self.goal_radius + 0.1:
                return self.observe(p)
        raise RuntimeError(f"aucune position de départ libre trouvée (graine de disposition {self.layout_seed})")

    def transition(self, state: np.ndarray, action: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        p, v = state[0:2], state[2:4]
        v_next = 0.5 * v + 0.5 * action * self.max_speed
        p_next = np.clip(p + self.dt * v_next, -self.arena, self.arena)
        return self.observe(p_next, v_next)

    def reward_fn(self, state: np.ndarray, action: np.ndarray, next_state: np.ndarray) -> np.ndarray:
        before = self._goal_distance(np.asarray(state)[..., 0:2])
        after = self._goal_distance(np.asarray(next_state)[..., 0:2])
        return self.progress_scale * (before - after) + self.goal_bonus * (after <= self.goal_radius)

    def cost_fn(self, state: np.ndarray, action: np.ndarray, next_state: np.ndarray) -> np.ndarray:
        return self._in_hazard(np.asarray(next_state)[..., 0:2]).astype(np.float64)

    def is_terminal(self, state: np.ndarray) -> bool:
        return bool(self._goal_distance(np.asarray(state)[0:2]) <= self.goal_radius)


# -------------------------------------------------------------------------
# CircleTrack
# -------------------------------------------------------------------------
class CircleTrack(CmdpEnv):
    """
    Rouler sur un cercle de rayon ρ à vitesse tangentielle cible.

    Récompense (sur l'état courant) :
        exp(-(v_tan - v*)² / (2 σ_v²)) / (1 + |r - ρ| / ρ)
    maximale (= 1) sur le cercle à la vitesse cible.
    Coût : 1 si la position suivante sort de l'anneau [0.8 ρ, 1.2 ρ].
    """

    name = "circle_track"

    def __init__(
        self,
        horizon: int = 200,
        gamma: float = 0.99,
        radius: float = 1.0,
        target_speed: float = 0.5,
        speed_tolerance: float = 0.2,
        dt: float = 0.1,
        acceleration: float = 2.0,
        max_speed: float = 2.0,
    ) -> None:
        super().__init__(obs_dim=4, action_dim=2, horizon=horizon, gamma=gamma)
        self.radius = radius
        self.target_speed = target_speed
        self.speed_tolerance = speed_tolerance
        self.dt = dt
        self.acceleration = acceleration
        self.max_speed = max_speed

    def sample_initial_state(self, rng: np.random.Generator) -> np.ndarray:
        angle = rng.uniform(0.0, 2.0 * math.pi)
        r = self.radius * rng.uniform(0.9, 1.1)
        return np.array([r * math.cos(angle), r * math.sin(angle), 0.0, 0.0])

    def transition(self, state: np.ndarray, action: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        p, v = state[0:2], state[2:4]
        v_next = v + self.dt * self.acceleration * action
        speed = float(np.linalg.norm(v_next))
        if speed > self.max_speed:
            v_next = v_next * (self.max_speed / speed)
        return np.concatenate([p + self.dt * v_next, v_next])

    def reward_fn(self, state: np.ndarray, action: np.ndarray, next_state: np.ndarray) -> np.ndarray:
        s = np.asarray(state)
        x, y, vx, vy = s[..., 0], s[..., 1], s[..., 2], s[..., 3]
        r = np.hypot(x, y)
        v_tan = (x * vy - y * vx) / np.maximum(r, 1e-12)
        speed_term = np.exp(-((v_tan - self.target_speed) ** 2) / (2.0 * self.speed_tolerance ** 2))
        return speed_term / (1.0 + np.abs(r - self.radius) / self.radius)

    def cost_fn(self, state: np.ndarray, action: np.ndarray, next_state: np.ndarray) -> np.ndarray:
        s = np.asarray(next_state)
        r = np.hypot(s[..., 0], s[..., 1])
        return ((r < 0.8 * self.radius) | (r > 1.2 * self.radius)).astype(np.float64)


# -------------------------------------------------------------------------
# CMDP discret
# -------------------------------------------------------------------------
@dataclass(frozen=True, eq=False)
class DiscreteCmdp:
    """
    CMDP tabulaire : P(s'|s,a), R(s,a,s'), C(s,a,s') de forme (S, A, S).
    """

    transitions: np.ndarray
    rewards: np.ndarray
    costs: np.ndarray
    gamma: float
    initial_state: int = 0

    def __post_init__(self) -> None:
        p = np.asarray(self.transitions, dtype=np.float64)
        if p.ndim != 3 or p.shape[2] != p.shape[0]:
            raise ValueError(f"transitions de forme (S, A, S) attendues, reçu {p.shape}")
        n_s, n_a = p.shape[0], p.shape[1]
        if n_s > 20 or n_a > 4:
            raise ValueError(f"CMDP trop grand pour l'oracle: |S|={n_s}, |A|={n_a}")
        if np.any(p < 0) or np.max(np.abs(p.sum(axis=2) - 1.0)) > 1e-12:
            raise ValueError("chaque P(.|s,a) doit être une distribution (somme 1 à 1e-12)")
        for label, table in (("rewards", self.rewards), ("costs", self.costs)):
            if np.asarray(table).shape != p.shape:
                raise ValueError(f"{label} de forme {np.asarray(table).shape}, {p.shape} attendue")
        if np.any(np.asarray(self.costs) < 0):
            raise ValueError("les coûts doivent être positifs ou nuls")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError(f"gamma doit être dans ]0, 1[, reçu {self.gamma}")
        if not 0 <= self.initial_state < n_s:
            raise ValueError(f"état initial {self.initial_state} hors de [0, {n_s})")
        object.__setattr__(self, "transitions", p)
        object.__setattr__(self, "rewards", np.asarray(self.rewards, dtype=np.float64))
        object.__setattr__(self, "costs", np.asarray(self.costs, dtype=np.float64))

    @property
    def n_states(self) -> int:
        return self.transitions.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transitions.shape[1]

    def expected(self, table: np.ndarray) -> np.ndarray:
        """Espérance E[x(s,a,s')] sous P, de forme (S, A)."""
        return np.einsum("ijk,ijk->ij", self.transitions, table)


def risky_chain(gamma: float = 0.9) -> DiscreteCmdp:
    """
    Chaîne à 3 états avec raccourci risqué.

    s0 --a0--> s1 --a0--> s2 (récompense 1, sans coût), puis retour en s0.
    s0 --a1--> s2 directement (récompense 1, coût 1). s1 --a1--> s0 ne rapporte rien.
    """
    p = np.zeros((3, 2, 3))
    r = np.zeros((3, 2, 3))
    c = np.zeros((3, 2, 3))
    p[0, 0, 1] = 1.0
    p[0, 1, 2] = 1.0
    r[0, 1, 2] = 1.0
    c[0, 1, 2] = 1.0
    p[1, 0, 2] = 1.0
    r[1, 0, 2] = 1.0
    p[1, 1, 0] = 1.0
    p[2, :, 0] = 1.0
    return DiscreteCmdp(transitions=p, rewards=r, costs=c, gamma=gamma, initial_state=0)


class DiscreteCmdpEnv(CmdpEnv):
    """
    Expose un DiscreteCmdp aux agents à action continue.

    Observation one-hot de l'état ; l'action 1-D de [-1, 1] est découpée en
    |A| intervalles égaux.
    """

    name = "risky_chain"

    def __init__(self, cmdp: Optional[DiscreteCmdp] = None, horizon: int = 100) -> None:
        self.cmdp = cmdp if cmdp is not None else risky_chain()
        super().__init__(obs_dim=self.cmdp.n_states, action_dim=1, horizon=horizon, gamma=self.cmdp.gamma)

    def action_index(self, action: np.ndarray) -> np.ndarray:
        a = np.asarray(action, dtype=np.float64)[..., 0]
        n_a = self.cmdp.n_actions
        idx = np.floor((np.clip(a, ACTION_LOW, ACTION_HIGH) - ACTION_LOW) / (ACTION_HIGH - ACTION_LOW) * n_a)
        return np.minimum(idx.astype(int), n_a - 1)

    def state_index(self, state: np.ndarray) -> np.ndarray:
        return np.argmax(np.asarray(state), axis=-1)

    def one_hot(self, index: int) -> np.ndarray:
        obs = np.zeros(self.cmdp.n_states)
        obs[index] = 1.0
        return obs

    def sample_initial_state(self, rng: np.random.Generator) -> np.ndarray:
        return self.one_hot(self.cmdp.initial_state)

    def transition(self, state: np.ndarray, action: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        s = int(self.state_index(state))
        a = int(self.action_index(action))
        return self.one_hot(int(rng.choice(self.cmdp.n_states, p=self.cmdp.transitions[s, a])))

    def _lookup(self, table: np.ndarray, state, action, next_state) -> np.ndarray:
        return table[self.state_index(state), self.action_index(action), self.state_index(next_state)]

    def reward_fn(self, state: np.ndarray, action: np.ndarray, next_state: np.ndarray) -> np.ndarray:
        return self._lookup(self.cmdp.rewards, state, action, next_state)

    def cost_fn(self, state: np.ndarray, action: np.ndarray, next_state: np.ndarray) -> np.ndarray:
        return self._lookup(self.cmdp.costs, state, action, next_state)


# -------------------------------------------------------------------------
# Registre et opérations
# -------------------------------------------------------------------------
def _make_risky_chain(horizon: int = 100, gamma: float = 0.9) -> DiscreteCmdpEnv:
    return DiscreteCmdpEnv(risky_chain(gamma=gamma), horizon=horizon)


ENV_REGISTRY: Dict[str, Callable[..., CmdpEnv]] = {
    HazardGoal2D.name: HazardGoal2D,
    CircleTrack.name: CircleTrack,
    DiscreteCmdpEnv.name: _make_risky_chain,
}


def make_env(name: str, horizon: int, gamma: float, **params: Any) -> CmdpEnv:
    """
    Instancie un environnement par son nom.

    Raises:
        KeyError: Si le nom n'est pas enregistré
    """
    if name not in ENV_REGISTRY:
        raise KeyError(f"environnement inconnu: {name} (disponibles: {sorted(ENV_REGISTRY)})")
    return ENV_REGISTRY[name](horizon=horizon, gamma=gamma, **params)


def reset(env: CmdpEnv, seed: int) -> np.ndarray:
    """État initial tiré de μ ; même graine -> même état."""
    return env.sample_initial_state(np.random.default_rng(seed))


def step(env: CmdpEnv, state: np.ndarray, action: Any, rng: Optional[np.random.Generator] = None) -> Transition:
    """Transition depuis `state` ; `rng` n'est consommé que par les dynamiques stochastiques."""
    return env.step_from(state, action, rng if rng is not None else np.random.default_rng(0))


def episode_return(trajectory: Sequence[Transition], gamma: float, channel: Channel | str = Channel.REWARD) -> float:
    """Somme actualisée Σ_t γ^t x_{t+1} du canal choisi."""
    if len(trajectory) == 0:
        raise ValueError("trajectoire vide")
    channel = Channel(channel)
    values = np.array([tr.reward if channel is Channel.REWARD else tr.cost for tr in trajectory])
    return float(np.sum(values * gamma ** np.arange(len(values))))
