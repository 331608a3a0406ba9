"""Toy pixel environment: a 6x6 pursuit grid rendered to 42x42 grayscale.

The agent starts in the bottom-left corner.  A low-value goal sits two
cells above the start; a high-value goal sits in the opposite corner
behind a seeded field of hazards.  Sticky actions make dynamics
stochastic: with probability ``sticky`` the action chosen on the
previous step is executed instead of the current one.
"""

from collections import deque

import numpy as np

GRID = 6
CELL = 7
FRAME = GRID * CELL  # 42

AGENT = 255.0
FAR_GOAL = 200.0
NEAR_GOAL = 150.0
HAZARD = 85.0
BACKGROUND = 0.0

START = (5, 0)
NEAR_POS = (3, 0)
FAR_POS = (0, 5)

NOOP, UP, DOWN, LEFT, RIGHT = range(5)
N_ACTIONS = 5
_MOVES = ((0, 0), (-1, 0), (1, 0), (0, -1), (0, 1))

REWARD_NEAR = 1.0
REWARD_FAR = 5.0
REWARD_HAZARD = -1.0
MAX_STEPS = 100
DEFAULT_STICKY = 0.25


def stack_state(new_obs, history):
    """Stack the newest frame onto up to 3 prior ones, oldest first.

    Short histories pad by repeating the oldest available frame, so the
    output always has exactly 4 frames.
    """
    frames = list(history)[-3:]
    while len(frames) < 3:
        oldest = frames[0] if frames else new_obs
        frames.insert(0, oldest)
    frames.append(new_obs)
    return np.stack(frames).astype(np.float32)


class FrameStack:
    """Rolling 4-frame window over a stream of observations."""

    def __init__(self):
        self._frames = deque(maxlen=4)

    def reset(self):
        self._frames.clear()

    def push(self, obs):
        """Append an observation and return the current (4,H,W) state."""
        self._frames.append(obs)
        return stack_state(self._frames[-1], list(self._frames)[:-1])

    def preview(self, obs):
        """State as if ``obs`` were pushed, without mutating the window."""
        return stack_state(obs, list(self._frames))


def _reachable(blocked, src, dst):
    if src == dst:
        return True
    seen = {src}
    queue = deque([src])
    while queue:
        r, c = queue.popleft()
        for dr, dc in _MOVES[1:]:
            nxt = (r + dr, c + dc)
            if (
                0 <= nxt[0] < GRID
                and 0 <= nxt[1] < GRID
                and nxt not in blocked
                and nxt not in seen
            ):
                if nxt == dst:
                    return True
                seen.add(nxt)
                queue.append(nxt)
    return False


class GridPursuit:
    """6x6 grid pursuit with pixel observations and sticky actions."""

    action_count = N_ACTIONS
    frame_shape = (FRAME, FRAME)

    def __init__(self, sticky=DEFAULT_STICKY, n_hazards=3, max_steps=MAX_STEPS):
        if not 0.0 <= sticky < 1.0:
            raise ValueError(f"sticky probability must be in [0,1), got {sticky}")
        self.sticky = float(sticky)
        self.n_hazards = int(n_hazards)
        self.max_steps = int(max_steps)
        self._rng = np.random.default_rng()
        self.agent = START
        self.hazards = frozenset()
        self.steps = 0
        self.done = True
        self._prev_action = None

    def reset(self, seed=None):
        """Start a new episode; the seed fixes hazards and stickiness."""
        self._rng = np.random.default_rng(seed)
        self.hazards = self._place_hazards()
        self.agent = START
        self.steps = 0
        self.done = False
        self._prev_action = None
        return self.render()

    def _place_hazards(self):
        excluded = {START, NEAR_POS, FAR_POS}
        # Keep the start's neighborhood clear so episodes cannot end on
        # the first random move.
        excluded.update(
            (START[0] + dr, START[1] + dc) for dr, dc in _MOVES
        )
        candidates = [
            (r, c)
            for r in range(GRID)
            for c in range(GRID)
            if (r, c) not in excluded
        ]
        while True:
            pick = self._rng.choice(len(candidates), size=self.n_hazards, replace=False)
            hazards = frozenset(candidates[i] for i in sorted(pick))
            if _reachable(hazards, START, NEAR_POS) and _reachable(
                hazards, START, FAR_POS
            ):
                return hazards

    def step(self, action):
        """Advance one step. Returns (observation, reward, done)."""
        if self.done:
            raise RuntimeError("step() called on a finished episode; reset() first")
        action = int(action)
        if not 0 <= action < N_ACTIONS:
            raise ValueError(f"action must be in [0,{N_ACTIONS}), got {action}")
        executed = action
        if self._prev_action is not None and self._rng.random() < self.sticky:
            executed = self._prev_action
        self._prev_action = action

        dr, dc = _MOVES[executed]
        nr, nc = self.agent[0] + dr, self.agent[1] + dc
        if 0 <= nr < GRID and 0 <= nc < GRID:
            self.agent = (nr, nc)

        self.steps += 1
        reward = 0.0
        if self.agent == NEAR_POS:
            reward, self.done = REWARD_NEAR, True
        elif self.agent == FAR_POS:
            reward, self.done = REWARD_FAR, True
        elif self.agent in self.hazards:
            reward, self.done = REWARD_HAZARD, True
        elif self.steps >= self.max_steps:
            self.done = True
        return self.render(), reward, self.done

    def render(self):
        """Rasterize the grid contents to a (42,42) float frame."""
        frame = np.full((FRAME, FRAME), BACKGROUND, dtype=np.float32)
        self._fill(frame, NEAR_POS, NEAR_GOAL)
        self._fill(frame, FAR_POS, FAR_GOAL)
        for cell in sorted(self.hazards):
            self._fill(frame, cell, HAZARD)
        self._fill(frame, self.agent, AGENT)
        return frame

    @staticmethod
    def _fill(frame, cell, value):
        r, c = cell
        frame[r * CELL : (r + 1) * CELL, c * CELL : (c + 1) * CELL] = value

    def shortest_path_action(self, target=FAR_POS):
        """First move of a BFS shortest path from the agent to ``target``,
        avoiding hazards. NOOP when already there or no path exists."""
        return _bfs_first_action(self.agent, target, self.hazards)


def _bfs_first_action(src, dst, blocked):
    if src == dst:
        return NOOP
    parent = {src: None}
    first = {src: None}
    queue = deque([src])
    while queue:
        pos = queue.popleft()
        for a in (UP, DOWN, LEFT, RIGHT):
            dr, dc = _MOVES[a]
            nxt = (pos[0] + dr, pos[1] + dc)
            if (
                not (0 <= nxt[0] < GRID and 0 <= nxt[1] < GRID)
                or nxt in blocked
                or nxt in parent
            ):
                continue
            parent[nxt] = pos
            first[nxt] = first[pos] if first[pos] is not None else a
            if nxt == dst:
                return first[nxt]
            queue.append(nxt)
    return NOOP


def _safe_first_action(src, dst, blocked):
    """First move of a least-cost path where cells bordering a blocked
    (terminal) cell carry extra cost.  Under sticky actions a repeated
    move can shove the agent one cell off course, so hugging terminals
    is risky."""
    import heapq

    if src == dst:
        return NOOP

    def risk(cell):
        for dr, dc in _MOVES[1:]:
            if (cell[0] + dr, cell[1] + dc) in blocked:
                return 4
        return 0

    best = {src: 0}
    heap = [(0, 0, src, None)]
    tie = 1
    while heap:
        cost, _, pos, act = heapq.heappop(heap)
        if pos == dst:
            return act if act is not None else NOOP
        if cost > best.get(pos, np.inf):
            continue
        for a in (UP, DOWN, LEFT, RIGHT):
            dr, dc = _MOVES[a]
            nxt = (pos[0] + dr, pos[1] + dc)
            if not (0 <= nxt[0] < GRID and 0 <= nxt[1] < GRID) or nxt in blocked:
                continue
            step = 1 + (risk(nxt) if nxt != dst else 0)
            if cost + step < best.get(nxt, np.inf):
                best[nxt] = cost + step
                heapq.heappush(
                    heap, (cost + step, tie, nxt, act if act is not None else a)
                )
                tie += 1
    return NOOP


def decode_frame(frame):
    """Invert rendering: recover agent, hazards and visible goals.

    Cells are classified by the center pixel of each 7x7 block.  Goal
    cells covered by the agent are reported at their fixed positions.
    """
    agent = None
    hazards = set()
    for r in range(GRID):
        for c in range(GRID):
            v = float(frame[r * CELL + CELL // 2, c * CELL + CELL // 2])
            if v == AGENT:
                agent = (r, c)
            elif v == HAZARD:
                hazards.add((r, c))
    return agent, hazards


class ScriptedFarSeeker:
    """Deterministic pixel-level policy: walk the BFS shortest path to
    the high-value goal, routing around hazards and the low-value goal
    (both are terminal cells)."""

    action_count = N_ACTIONS

    def act(self, state):
        frame = state[-1]
        agent, hazards = decode_frame(frame)
        if agent is None:
            return NOOP
        return _safe_first_action(agent, FAR_POS, hazards | {NEAR_POS})
