"""
Seedable toy environments.

MiniRail    - agents drive along a seeded rail network to individual goals,
              hearing only agents within a rail-distance radius
SkirmishToy - a small team fights a deterministic focus-fire opponent with
              a team-global reward and range-limited attacks

Both are driven through MultiAgentEnv: reset(seed) and step(actions) return
an EnvStep. Action 0 (stop / no-op) is the only action of a done agent.
"""
from collections import deque
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Set, Tuple

import numpy as np

from core import ContractViolationError, EnvName, InvalidInputError, MambaConfig

# N, E, S, W
DIRECTIONS: Tuple[Tuple[int, int], ...] = ((-1, 0), (0, 1), (1, 0), (0, -1))


@dataclass
class EnvStep:
    obs: np.ndarray
    rewards: np.ndarray
    dones: np.ndarray
    action_masks: np.ndarray
    neighbors: List[Set[int]]
    done: bool
    info: Dict[str, Any] = field(default_factory=dict)
    truncated: bool = False          # cut by the step limit

    @property
    def alive(self) -> np.ndarray:
        return ~self.dones

    @property
    def neighbor_mask(self) -> np.ndarray:
        n = len(self.neighbors)
        mask = np.eye(n, dtype=bool)
        for i, group in enumerate(self.neighbors):
            for j in group:
                mask[i, j] = True
        return mask


class MultiAgentEnv:
    """Common surface of the toy environments"""

    name: EnvName
    n_agents: int
    n_actions: int
    obs_size: int
    max_steps: int

    def reset(self, seed: int) -> EnvStep:
        raise NotImplementedError

    def step(self, actions: Sequence[int]) -> EnvStep:
        raise NotImplementedError

    def neighbors(self, radius: Optional[float] = None) -> List[Set[int]]:
        raise NotImplementedError

    def action_masks(self) -> np.ndarray:
        raise NotImplementedError

    def legal_actions(self, agent: int) -> np.ndarray:
        """Brute-force legality of every action for one agent"""
        raise NotImplementedError

    def success(self) -> float:
        raise NotImplementedError

    def render(self) -> str:
        raise NotImplementedError

    def spec_dict(self) -> Dict[str, Any]:
        raise NotImplementedError

    def _check_actions(self, actions: Sequence[int]) -> np.ndarray:
        actions = np.asarray(actions, dtype=np.int64).reshape(-1)
        if actions.shape[0] != self.n_agents:
            raise InvalidInputError(f"expected {self.n_agents} actions, got {actions.shape[0]}")
        masks = self.action_masks()
        for i, action in enumerate(actions):
            if not 0 <= action < self.n_actions or not masks[i, action]:
                raise ContractViolationError(f"agent {i} submitted masked action {int(action)}")
        return actions


# =============================================================================
# MINIRAIL
# =============================================================================

class MiniRail(MultiAgentEnv):
    """
    Rail network on a G x G node grid.

    Rails are a random spanning tree plus a few extra edges. An agent sits
    on a node with a heading; forward / left / right follow the rail leaving
    in that relative direction, and at a dead end forward reverses.
    Arrival: +1 and the agent leaves the map. Collision: every halted mover
    gets -1. Shaping: +0.01 per unit decrease of the shortest-path distance.
    """

    name = EnvName.MINIRAIL
    STOP, FORWARD, LEFT, RIGHT = 0, 1, 2, 3
    n_actions = 4

    def __init__(self, n_agents: int = 2, grid_size: int = 9, max_steps: int = 80,
                 locality_radius: Optional[int] = 5, extra_edge_prob: float = 0.15, shaping: float = 0.01):
        if grid_size * grid_size < 2 * n_agents:
            raise InvalidInputError(f"a {grid_size}x{grid_size} grid cannot host {n_agents} agents")
        self.n_agents = n_agents
        self.grid_size = grid_size
        self.max_steps = max_steps
        self.locality_radius = locality_radius
        self.extra_edge_prob = extra_edge_prob
        self.shaping = shaping
        self.obs_size = 4 * grid_size + 70
        self.t = 0

    # ---------------------------------------------------------------- layout

    def _build_rails(self, rng: np.random.Generator) -> None:
        g = self.grid_size
        self.rails = np.zeros((g, g, 4), dtype=bool)
        visited = np.zeros((g, g), dtype=bool)
        start = (int(rng.integers(g)), int(rng.integers(g)))
        visited[start] = True
        stack = [start]
        while stack:
            r, c = stack[-1]
            options = [d for d, (dr, dc) in enumerate(DIRECTIONS)
                       if 0 <= r + dr < g and 0 <= c + dc < g and not visited[r + dr, c + dc]]
            if not options:
                stack.pop()
                continue
            d = options[int(rng.integers(len(options)))]
            self._link((r, c), d)
            nxt = (r + DIRECTIONS[d][0], c + DIRECTIONS[d][1])
            visited[nxt] = True
            stack.append(nxt)
        # Extra edges create loops; east and south only so each pair is tried once
        for r in range(g):
            for c in range(g):
                for d in (1, 2):
                    nr, nc = r + DIRECTIONS[d][0], c + DIRECTIONS[d][1]
                    if nr < g and nc < g and not self.rails[r, c, d] and rng.random() < self.extra_edge_prob:
                        self._link((r, c), d)
        self._node_distances = self._all_node_distances()
        self._predecessors = self._state_predecessors()

    def _link(self, node: Tuple[int, int], d: int) -> None:
        r, c = node
        dr, dc = DIRECTIONS[d]
        self.rails[r, c, d] = True
        self.rails[r + dr, c + dc, (d + 2) % 4] = True

    def moves(self, node: Tuple[int, int], heading: int) -> Dict[int, Tuple[Tuple[int, int], int]]:
        """Moving actions available from (node, heading) and where they lead"""
        r, c = node
        out = {}
        for action, d in ((self.FORWARD, heading), (self.LEFT, (heading + 3) % 4), (self.RIGHT, (heading + 1) % 4)):
            if self.rails[r, c, d]:
                out[action] = ((r + DIRECTIONS[d][0], c + DIRECTIONS[d][1]), d)
        if not out:
            back = (heading + 2) % 4
            if self.rails[r, c, back]:
                out[self.FORWARD] = ((r + DIRECTIONS[back][0], c + DIRECTIONS[back][1]), back)
        return out

    def _all_node_distances(self) -> np.ndarray:
        g = self.grid_size
        n_nodes = g * g
        dist = np.full((n_nodes, n_nodes), np.inf)
        for source in range(n_nodes):
            dist[source, source] = 0
            queue = deque([source])
            while queue:
                cur = queue.popleft()
                r, c = divmod(cur, g)
                for d, (dr, dc) in enumerate(DIRECTIONS):
                    if self.rails[r, c, d]:
                        nxt = (r + dr) * g + (c + dc)
                        if dist[source, nxt] == np.inf:
                            dist[source, nxt] = dist[source, cur] + 1
                            queue.append(nxt)
        return dist

    def _state_predecessors(self) -> Dict[Tuple[Tuple[int, int], int], List[Tuple[Tuple[int, int], int]]]:
        preds: Dict[Tuple[Tuple[int, int], int], List] = {}
        for r in range(self.grid_size):
            for c in range(self.grid_size):
                for h in range(4):
                    for target in self.moves((r, c), h).values():
                        preds.setdefault(target, []).append(((r, c), h))
        return preds

    def goal_distances(self, goal: Tuple[int, int]) -> np.ndarray:
        """Fewest moves from every (row, col, heading) state to the goal node"""
        g = self.grid_size
        dist = np.full((g, g, 4), np.inf)
        queue = deque()
        for h in range(4):
            dist[goal[0], goal[1], h] = 0
            queue.append((goal, h))
        while queue:
            state = queue.popleft()
            base = dist[state[0][0], state[0][1], state[1]]
            for (node, h) in self._predecessors.get(state, ()):
                if dist[node[0], node[1], h] == np.inf:
                    dist[node[0], node[1], h] = base + 1
                    queue.append((node, h))
        return dist

    # ------------------------------------------------------------- episode

    def reset(self, seed: int) -> EnvStep:
        rng = np.random.default_rng(seed)
        self._build_rails(rng)
        g = self.grid_size
        self.t = 0
        starts = rng.choice(g * g, size=self.n_agents, replace=False)
        self.positions: List[Tuple[int, int]] = []
        self.headings: List[int] = []
        self.goals: List[Tuple[int, int]] = []
        self._goal_dist: List[np.ndarray] = []
        for i in range(self.n_agents):
            node = divmod(int(starts[i]), g)
            headings = [d for d in range(4) if self.rails[node[0], node[1], d]]
            heading = headings[int(rng.integers(len(headings)))]
            while True:
                goal = divmod(int(rng.integers(g * g)), g)
                if goal == node:
                    continue
                table = self.goal_distances(goal)
                if np.isfinite(table[node[0], node[1], heading]):
                    break
            self.positions.append(node)
            self.headings.append(heading)
            self.goals.append(goal)
            self._goal_dist.append(table)
        self.dones = np.zeros(self.n_agents, dtype=bool)
        self.arrived = np.zeros(self.n_agents, dtype=bool)
        return self._emit(np.zeros(self.n_agents, dtype=np.float32), {})

    def distance_to_goal(self, agent: int) -> float:
        r, c = self.positions[agent]
        return float(self._goal_dist[agent][r, c, self.headings[agent]])

    def step(self, actions: Sequence[int]) -> EnvStep:
        actions = self._check_actions(actions)
        self.t += 1
        rewards = np.zeros(self.n_agents, dtype=np.float32)
        active = [i for i in range(self.n_agents) if not self.dones[i]]
        targets: Dict[int, Tuple[Tuple[int, int], int]] = {}
        for i in active:
            if actions[i] != self.STOP:
                targets[i] = self.moves(self.positions[i], self.headings[i])[int(actions[i])]

        halted: Set[int] = set()
        changed = True
        while changed:
            changed = False
            movers = [i for i in targets if i not in halted]
            standing = {self.positions[i] for i in active if i not in targets or i in halted}
            for i in movers:
                node = targets[i][0]
                blocked = node in standing
                for j in movers:
                    if j == i:
                        continue
                    if targets[j][0] == node:
                        blocked = True
                    if targets[j][0] == self.positions[i] and node == self.positions[j]:
                        blocked = True
                if blocked:
                    halted.add(i)
                    changed = True

        collisions = 0
        for i in active:
            if i in halted:
                rewards[i] -= 1.0
                collisions += 1
                continue
            if i not in targets:
                continue
            before = self.distance_to_goal(i)
            self.positions[i], self.headings[i] = targets[i]
            after = self.distance_to_goal(i)
            rewards[i] += self.shaping * (before - after)
            if self.positions[i] == self.goals[i]:
                rewards[i] += 1.0
                self.dones[i] = True
                self.arrived[i] = True
        return self._emit(rewards, {"collisions": collisions})

    def _emit(self, rewards: np.ndarray, info: Dict[str, Any]) -> EnvStep:
        finished = bool(self.dones.all())
        truncated = not finished and self.t >= self.max_steps
        info = dict(info, t=self.t, arrived=int(self.arrived.sum()))
        return EnvStep(
            obs=np.stack([self._observe(i) for i in range(self.n_agents)]),
            rewards=rewards,
            dones=self.dones.copy(),
            action_masks=self.action_masks(),
            neighbors=self.neighbors(self.locality_radius),
            done=finished or truncated,
            info=info,
            truncated=truncated,
        )

    # --------------------------------------------------------- inspection

    def action_masks(self) -> np.ndarray:
        masks = np.zeros((self.n_agents, self.n_actions), dtype=bool)
        masks[:, self.STOP] = True
        for i in range(self.n_agents):
            if not self.dones[i]:
                for action in self.moves(self.positions[i], self.headings[i]):
                    masks[i, action] = True
        return masks

    def legal_actions(self, agent: int) -> np.ndarray:
        legal = np.zeros(self.n_actions, dtype=bool)
        legal[self.STOP] = True
        if self.dones[agent]:
            return legal
        r, c = self.positions[agent]
        g = self.grid_size
        heading = self.headings[agent]
        relative = {self.FORWARD: heading, self.LEFT: (heading + 3) % 4, self.RIGHT: (heading + 1) % 4}
        for action, d in relative.items():
            nr, nc = r + DIRECTIONS[d][0], c + DIRECTIONS[d][1]
            # A rail exists iff both endpoints record it
            legal[action] = 0 <= nr < g and 0 <= nc < g and self.rails[r, c, d] and self.rails[nr, nc, (d + 2) % 4]
        if not legal[1:].any():
            legal[self.FORWARD] = bool(self.rails[r, c, (heading + 2) % 4])
        return legal

    def neighbors(self, radius: Optional[float] = None) -> List[Set[int]]:
        """Agents within `radius` rail hops (done agents use their last node)"""
        g = self.grid_size
        nodes = [r * g + c for r, c in self.positions]
        out = []
        for i in range(self.n_agents):
            if radius is None:
                out.append(set(range(self.n_agents)))
            else:
                out.append({j for j in range(self.n_agents) if self._node_distances[nodes[i], nodes[j]] <= radius})
        return out

    def rail_distance(self, a: Tuple[int, int], b: Tuple[int, int]) -> float:
        g = self.grid_size
        return float(self._node_distances[a[0] * g + a[1], b[0] * g + b[1]])

    def _observe(self, i: int) -> np.ndarray:
        g = self.grid_size
        obs = np.zeros(self.obs_size, dtype=np.float32)
        if self.dones[i]:
            return obs
        (r, c), (gr, gc) = self.positions[i], self.goals[i]
        obs[r] = 1.0
        obs[g + c] = 1.0
        obs[2 * g + gr] = 1.0
        obs[3 * g + gc] = 1.0
        k = 4 * g
        obs[k + self.headings[i]] = 1.0
        k += 4
        mask = self.action_masks()[i]
        obs[k:k + 4] = mask
        k += 4
        obs[k] = min(self.distance_to_goal(i), 4.0 * g) / (4.0 * g)
        k += 1
        others = {self.positions[j] for j in range(self.n_agents) if j != i and not self.dones[j]}
        for dr in range(-2, 3):
            for dc in range(-2, 3):
                if (r + dr, c + dc) in others:
                    obs[k] = 1.0
                k += 1
        for dr in range(-1, 2):
            for dc in range(-1, 2):
                nr, nc = r + dr, c + dc
                if 0 <= nr < g and 0 <= nc < g:
                    obs[k:k + 4] = self.rails[nr, nc]
                k += 4
        return obs

    def success(self) -> float:
        return float(self.arrived.mean())

    def render(self) -> str:
        g = self.grid_size
        lines = [f"t={self.t}"]
        agents = {pos: str(i) for i, pos in enumerate(self.positions) if not self.dones[i]}
        goals = {pos: chr(ord("a") + i) for i, pos in enumerate(self.goals) if not self.dones[i]}
        for r in range(g):
            row, below = [], []
            for c in range(g):
                cell = agents.get((r, c)) or goals.get((r, c)) or ("+" if self.rails[r, c].any() else ".")
                row.append(cell + ("-" if self.rails[r, c, 1] else " "))
                below.append(("|" if self.rails[r, c, 2] else " ") + " ")
            lines.append("".join(row).rstrip())
            lines.append("".join(below).rstrip())
        return "\n".join(lines)

    def spec_dict(self) -> Dict[str, Any]:
        return {
            "env.name": self.name.value,
            "env.n_agents": self.n_agents,
            "env.grid_size": self.grid_size,
            "env.max_steps": self.max_steps,
            "env.locality_radius": "none" if self.locality_radius is None else self.locality_radius,
            "env.extra_edge_prob": self.extra_edge_prob,
            "env.obs_size": self.obs_size,
            "env.n_actions": self.n_actions,
        }


# =============================================================================
# SKIRMISHTOY
# =============================================================================

class SkirmishToy(MultiAgentEnv):
    """
    Team A (learned) against team B (scripted focus fire) on a G x G grid.

    Actions: 0 no-op, 1-4 move N/S/E/W, 5+j attack enemy j. Attacks need the
    target alive and within Chebyshev range. Every living A unit receives the
    team reward (damage dealt - damage taken) / max_hp, plus 1 on a win.
    """

    name = EnvName.SKIRMISH
    NOOP = 0
    MOVES = {1: (-1, 0), 2: (1, 0), 3: (0, 1), 4: (0, -1)}

    def __init__(self, n_agents: int = 3, n_enemies: Optional[int] = None, grid_size: int = 7,
                 max_steps: int = 60, max_hp: int = 3, attack_range: int = 2, damage: int = 1):
        self.n_agents = n_agents
        self.n_enemies = n_enemies or n_agents
        if n_agents + self.n_enemies > 2 * grid_size:
            raise InvalidInputError(f"{n_agents}v{self.n_enemies} does not fit the {grid_size}x{grid_size} spawn columns")
        self.grid_size = grid_size
        self.max_steps = max_steps
        self.max_hp = max_hp
        self.attack_range = attack_range
        self.damage = damage
        self.n_actions = 5 + self.n_enemies
        self.obs_size = 2 * grid_size + 1 + 4 * (n_agents - 1) + 5 * self.n_enemies + self.n_actions
        self.t = 0

    def reset(self, seed: int) -> EnvStep:
        rng = np.random.default_rng(seed)
        g = self.grid_size
        self.t = 0
        left = rng.choice(2 * g, size=self.n_agents, replace=False)
        right = rng.choice(2 * g, size=self.n_enemies, replace=False)
        self.pos_a = [(int(k) % g, int(k) // g) for k in left]
        self.pos_b = [(int(k) % g, g - 1 - int(k) // g) for k in right]
        self.hp_a = np.full(self.n_agents, self.max_hp, dtype=np.int64)
        self.hp_b = np.full(self.n_enemies, self.max_hp, dtype=np.int64)
        self.won = False
        return self._emit(np.zeros(self.n_agents, dtype=np.float32), {})

    @property
    def dones(self) -> np.ndarray:
        return self.hp_a <= 0

    @staticmethod
    def chebyshev(a: Tuple[int, int], b: Tuple[int, int]) -> int:
        return max(abs(a[0] - b[0]), abs(a[1] - b[1]))

    def _occupied(self) -> Set[Tuple[int, int]]:
        cells = {p for p, hp in zip(self.pos_a, self.hp_a) if hp > 0}
        return cells | {p for p, hp in zip(self.pos_b, self.hp_b) if hp > 0}

    def _free(self, cell: Tuple[int, int], occupied: Set[Tuple[int, int]]) -> bool:
        g = self.grid_size
        return 0 <= cell[0] < g and 0 <= cell[1] < g and cell not in occupied

    def scripted_actions(self) -> List[int]:
        """Team B: attack the weakest A unit in range, else close in on the nearest"""
        occupied = self._occupied()
        actions = []
        living_a = [i for i in range(self.n_agents) if self.hp_a[i] > 0]
        for k in range(self.n_enemies):
            if self.hp_b[k] <= 0 or not living_a:
                actions.append(self.NOOP)
                continue
            here = self.pos_b[k]
            in_range = [i for i in living_a if self.chebyshev(here, self.pos_a[i]) <= self.attack_range]
            if in_range:
                target = min(in_range, key=lambda i: (self.hp_a[i], i))
                actions.append(5 + target)
                continue
            target = min(living_a, key=lambda i: (self.chebyshev(here, self.pos_a[i]), i))
            best, best_dist = self.NOOP, self.chebyshev(here, self.pos_a[target])
            for action, (dr, dc) in self.MOVES.items():
                cell = (here[0] + dr, here[1] + dc)
                if self._free(cell, occupied):
                    dist = self.chebyshev(cell, self.pos_a[target])
                    if dist < best_dist:
                        best, best_dist = action, dist
            actions.append(best)
        return actions

    def step(self, actions: Sequence[int]) -> EnvStep:
        actions = self._check_actions(actions)
        enemy_actions = self.scripted_actions()
        self.t += 1
        alive_before = self.hp_a > 0

        hit_b = np.zeros(self.n_enemies, dtype=np.int64)
        hit_a = np.zeros(self.n_agents, dtype=np.int64)
        for i in range(self.n_agents):
            if alive_before[i] and actions[i] >= 5:
                hit_b[actions[i] - 5] += self.damage
        for k, action in enumerate(enemy_actions):
            if action >= 5:
                hit_a[action - 5] += self.damage
        dealt = int(np.minimum(hit_b, np.maximum(self.hp_b, 0)).sum())
        taken = int(np.minimum(hit_a, np.maximum(self.hp_a, 0)).sum())
        self.hp_b = self.hp_b - hit_b
        self.hp_a = self.hp_a - hit_a

        # Survivors move in index order, A before B, into currently free cells
        occupied = self._occupied()
        for i in range(self.n_agents):
            if self.hp_a[i] > 0 and actions[i] in self.MOVES:
                cell = (self.pos_a[i][0] + self.MOVES[int(actions[i])][0], self.pos_a[i][1] + self.MOVES[int(actions[i])][1])
                if self._free(cell, occupied):
                    occupied.discard(self.pos_a[i])
                    occupied.add(cell)
                    self.pos_a[i] = cell
        for k, action in enumerate(enemy_actions):
            if self.hp_b[k] > 0 and action in self.MOVES:
                cell = (self.pos_b[k][0] + self.MOVES[action][0], self.pos_b[k][1] + self.MOVES[action][1])
                if self._free(cell, occupied):
                    occupied.discard(self.pos_b[k])
                    occupied.add(cell)
                    self.pos_b[k] = cell

        team_reward = (dealt - taken) / self.max_hp
        if (self.hp_b <= 0).all():
            self.won = True
            team_reward += 1.0
        rewards = np.where(alive_before, team_reward, 0.0).astype(np.float32)
        return self._emit(rewards, {"dealt": dealt, "taken": taken})

    def _emit(self, rewards: np.ndarray, info: Dict[str, Any]) -> EnvStep:
        finished = bool((self.hp_a <= 0).all() or (self.hp_b <= 0).all())
        truncated = not finished and self.t >= self.max_steps
        info = dict(info, t=self.t, won=self.won)
        return EnvStep(
            obs=np.stack([self._observe(i) for i in range(self.n_agents)]),
            rewards=rewards,
            dones=self.dones.copy(),
            action_masks=self.action_masks(),
            neighbors=self.neighbors(),
            done=finished or truncated,
            info=info,
            truncated=truncated,
        )

    def action_masks(self) -> np.ndarray:
        masks = np.zeros((self.n_agents, self.n_actions), dtype=bool)
        masks[:, self.NOOP] = True
        occupied = self._occupied()
        for i in range(self.n_agents):
            if self.hp_a[i] <= 0:
                continue
            here = self.pos_a[i]
            for action, (dr, dc) in self.MOVES.items():
                masks[i, action] = self._free((here[0] + dr, here[1] + dc), occupied)
            for k in range(self.n_enemies):
                masks[i, 5 + k] = self.hp_b[k] > 0 and self.chebyshev(here, self.pos_b[k]) <= self.attack_range
        return masks

    def legal_actions(self, agent: int) -> np.ndarray:
        legal = np.zeros(self.n_actions, dtype=bool)
        legal[self.NOOP] = True
        if self.hp_a[agent] <= 0:
            return legal
        r, c = self.pos_a[agent]
        g = self.grid_size
        units = [p for p, hp in zip(self.pos_a + self.pos_b, list(self.hp_a) + list(self.hp_b)) if hp > 0]
        for action, (dr, dc) in self.MOVES.items():
            nr, nc = r + dr, c + dc
            legal[action] = 0 <= nr < g and 0 <= nc < g and all(u != (nr, nc) for u in units)
        for k in range(self.n_enemies):
            er, ec = self.pos_b[k]
            legal[5 + k] = self.hp_b[k] > 0 and abs(er - r) <= self.attack_range and abs(ec - c) <= self.attack_range
        return legal

    def neighbors(self, radius: Optional[float] = None) -> List[Set[int]]:
        return [set(range(self.n_agents)) for _ in range(self.n_agents)]

    def _observe(self, i: int) -> np.ndarray:
        g = self.grid_size
        obs = np.zeros(self.obs_size, dtype=np.float32)
        if self.hp_a[i] <= 0:
            return obs
        r, c = self.pos_a[i]
        obs[r] = 1.0
        obs[g + c] = 1.0
        obs[2 * g] = self.hp_a[i] / self.max_hp
        k = 2 * g + 1
        scale = max(g - 1, 1)
        for j in range(self.n_agents):
            if j == i:
                continue
            if self.hp_a[j] > 0:
                obs[k:k + 4] = (1.0, (self.pos_a[j][0] - r) / scale, (self.pos_a[j][1] - c) / scale,
                                self.hp_a[j] / self.max_hp)
            k += 4
        for j in range(self.n_enemies):
            if self.hp_b[j] > 0:
                in_range = self.chebyshev((r, c), self.pos_b[j]) <= self.attack_range
                obs[k:k + 5] = (1.0, (self.pos_b[j][0] - r) / scale, (self.pos_b[j][1] - c) / scale,
                                self.hp_b[j] / self.max_hp, float(in_range))
            k += 5
        obs[k:k + self.n_actions] = self.action_masks()[i]
        return obs

    def success(self) -> float:
        return 1.0 if self.won else 0.0

    def render(self) -> str:
        g = self.grid_size
        grid = [["." for _ in range(g)] for _ in range(g)]
        for i, (p, hp) in enumerate(zip(self.pos_a, self.hp_a)):
            if hp > 0:
                grid[p[0]][p[1]] = str(i)
        for k, (p, hp) in enumerate(zip(self.pos_b, self.hp_b)):
            if hp > 0:
                grid[p[0]][p[1]] = chr(ord("A") + k)
        header = f"t={self.t} hp_a={list(map(int, self.hp_a))} hp_b={list(map(int, self.hp_b))}"
        return "\n".join([header] + [" ".join(row) for row in grid])

    def spec_dict(self) -> Dict[str, Any]:
        return {
            "env.name": self.name.value,
            "env.n_agents": self.n_agents,
            "env.n_enemies": self.n_enemies,
            "env.grid_size": self.grid_size,
            "env.max_steps": self.max_steps,
            "env.max_hp": self.max_hp,
            "env.attack_range": self.attack_range,
            "env.damage": self.damage,
            "env.obs_size": self.obs_size,
            "env.n_actions": self.n_actions,
        }


def make_env(config: MambaConfig) -> MultiAgentEnv:
    if config.env == EnvName.MINIRAIL:
        return MiniRail(
            n_agents=config.n_agents,
            grid_size=config.grid_size or 9,
            max_steps=config.max_episode_steps or 80,
            locality_radius=config.locality_radius,
        )
    return SkirmishToy(
        n_agents=config.n_agents,
        n_enemies=config.n_enemies,
        grid_size=config.grid_size or 7,
        max_steps=config.max_episode_steps or 60,
    )
