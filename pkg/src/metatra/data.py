"""Trajectory data: parsing, windowing, relativization, statistics, synthesis, batching."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import reduce
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import kernels
from .errors import ConfigError, DataError, ParseError, UsageError

AGENT_TYPES = ("pedestrian", "bike", "car", "teammate", "opponent", "ball")
AGENT_TYPE_INDEX = {name: i for i, name in enumerate(AGENT_TYPES)}

DEFAULT_COLUMNS = ("frame", "agent", "x", "y")


@dataclass
class AgentTrack:
    agent_id: int
    positions: np.ndarray  # (L, 3): frame, x, y
    agent_type: str = "pedestrian"

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        if len(self.positions) == 0:
            raise DataError(f"track {self.agent_id} has no positions")
        if not np.all(np.isfinite(self.positions)):
            raise DataError(f"track {self.agent_id} has non-finite coordinates")
        frames = self.positions[:, 0]
        if np.any(frames < 0) or np.any(frames != np.round(frames)):
            raise DataError(f"track {self.agent_id} has invalid frame indices")
        if np.any(np.diff(frames) <= 0):
            raise DataError(f"track {self.agent_id} frames are not strictly increasing")
        if self.agent_type not in AGENT_TYPE_INDEX:
            raise DataError(f"unknown agent type {self.agent_type!r}")

    @property
    def frames(self) -> np.ndarray:
        return self.positions[:, 0].astype(np.int64)


@dataclass
class Scene:
    domain_id: str
    frame_dt: float
    tracks: List[AgentTrack] = field(default_factory=list)

    def __post_init__(self):
        if not self.frame_dt > 0:
            raise DataError(f"frame_dt must be positive, got {self.frame_dt}")

    def frame_step(self) -> int:
        """Spacing of the annotation grid (gcd of frame differences)."""
        frames = np.unique(np.concatenate([t.frames for t in self.tracks])) if self.tracks else []
        if len(frames) < 2:
            return 1
        return int(reduce(math.gcd, np.diff(frames).tolist()))


@dataclass
class TrajectoryWindow:
    domain_id: str
    t_obs: int
    t_pre: int
    past: np.ndarray  # (N, t_obs, 2)
    future: np.ndarray  # (N, t_pre - t_obs, 2)
    agent_types: List[str]
    agent_ids: List[int] = field(default_factory=list)
    mask: Optional[np.ndarray] = None
    start_frame: int = 0
    window_id: str = ""
    reference_point: np.ndarray = field(default_factory=lambda: np.zeros(2))

    def __post_init__(self):
        if not 0 < self.t_obs < self.t_pre:
            raise ConfigError(f"need 0 < t_obs < t_pre, got {self.t_obs}, {self.t_pre}")
        if self.mask is None:
            self.mask = np.ones(len(self.past), dtype=bool)

    @property
    def n_agents(self) -> int:
        return int(np.sum(self.mask))


@dataclass
class DomainStats:
    density: float
    speed: float
    acceleration: float

    def as_dict(self) -> Dict[str, float]:
        return {"density": self.density, "speed": self.speed, "acceleration": self.acceleration}


@dataclass
class SynthDomainSpec:
    """Parameters of one synthetic crowd domain (social-force style dynamics)."""

    domain_id: str
    agents_per_scene: Tuple[int, int] = (3, 6)
    speed_mean: float = 1.0
    speed_std: float = 0.2
    turn_rate: float = 0.05
    goal_attraction: float = 0.2
    avoidance_strength: float = 0.5
    avoidance_radius: float = 1.0
    arena: Tuple[float, float, float, float] = (0.0, 0.0, 10.0, 10.0)
    frame_dt: float = 0.4
    seed_offset: int = 0

    def validate(self):
        lo, hi = self.agents_per_scene
        if lo < 1 or hi < lo:
            raise ConfigError(f"{self.domain_id}: agents_per_scene must satisfy 1 <= lo <= hi, got {self.agents_per_scene}")
        vals = [self.speed_mean, self.speed_std, self.turn_rate, self.goal_attraction,
                self.avoidance_strength, self.avoidance_radius, self.frame_dt, *self.arena]
        if not all(math.isfinite(v) for v in vals):
            raise ConfigError(f"{self.domain_id}: non-finite parameter")
        if self.avoidance_radius <= 0:
            raise ConfigError(f"{self.domain_id}: avoidance_radius must be positive")
        if self.speed_std < 0 or self.turn_rate < 0 or self.avoidance_strength < 0:
            raise ConfigError(f"{self.domain_id}: speed_std, turn_rate, avoidance_strength must be >= 0")
        if self.frame_dt <= 0:
            raise ConfigError(f"{self.domain_id}: frame_dt must be positive")
        x0, y0, x1, y1 = self.arena
        if not (x1 > x0 and y1 > y0):
            raise ConfigError(f"{self.domain_id}: empty arena {self.arena}")

    @classmethod
    def from_dict(cls, d: dict) -> "SynthDomainSpec":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown synth spec fields: {sorted(unknown)}")
        if "agents_per_scene" in d:
            aps = d["agents_per_scene"]
            d["agents_per_scene"] = (int(aps), int(aps)) if np.isscalar(aps) else tuple(int(a) for a in aps)
        if "arena" in d:
            d["arena"] = tuple(float(a) for a in d["arena"])
        return cls(**d)

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.__dict__.items()}


# --------------------------------------------------------------------------- io

def load_ethucy_file(path, frame_dt: float = 0.4, domain_id: Optional[str] = None,
                     columns: Sequence[str] = DEFAULT_COLUMNS) -> Scene:
    """Parse a whitespace-delimited ``frame agent x y`` file into a :class:`Scene`.

    ``columns`` gives the order of the four fields in the file.
    """
    path = Path(path)
    if sorted(columns) != sorted(DEFAULT_COLUMNS):
        raise ConfigError(f"columns must be a permutation of {DEFAULT_COLUMNS}, got {columns}")
    col = {name: i for i, name in enumerate(columns)}
    rows: Dict[int, List[Tuple[int, float, float]]] = {}
    seen = set()
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            fields = line.split()
            if not fields:
                continue
            if len(fields) != 4:
                raise ParseError(f"expected 4 fields, got {len(fields)}", line=lineno, path=path)
            try:
                frame_f = float(fields[col["frame"]])
                agent_f = float(fields[col["agent"]])
                x = float(fields[col["x"]])
                y = float(fields[col["y"]])
            except ValueError as exc:
                raise ParseError(str(exc), line=lineno, path=path) from None
            if frame_f != int(frame_f) or agent_f != int(agent_f) or frame_f < 0:
                raise ParseError("frame and agent ids must be non-negative integers", line=lineno, path=path)
            if not (math.isfinite(x) and math.isfinite(y)):
                raise ParseError("non-finite coordinate", line=lineno, path=path)
            frame, agent = int(frame_f), int(agent_f)
            if (frame, agent) in seen:
                raise DataError(f"{path}:{lineno}: duplicate entry for frame {frame}, agent {agent}")
            seen.add((frame, agent))
            rows.setdefault(agent, []).append((frame, x, y))
    tracks = []
    for agent in sorted(rows):
        pos = np.array(sorted(rows[agent]), dtype=np.float64)
        tracks.append(AgentTrack(agent, pos))
    return Scene(domain_id or path.stem, frame_dt, tracks)


def format_scene(scene: Scene) -> str:
    """Serialize to the canonical text format, sorted by frame then agent."""
    rows = []
    for track in scene.tracks:
        for frame, x, y in track.positions:
            rows.append((int(frame), track.agent_id, float(x), float(y)))
    rows.sort(key=lambda r: (r[0], r[1]))
    return "".join(f"{f} {a} {x!r} {y!r}\n" for f, a, x, y in rows)


def write_scene(scene: Scene, path) -> None:
    Path(path).write_text(format_scene(scene))


# --------------------------------------------------------------------- windows

def window_scene(scene: Scene, t_obs: int = 8, t_pre: int = 20, stride: int = 1) -> List[TrajectoryWindow]:
    if t_obs >= t_pre or t_obs <= 0:
        raise ConfigError(f"need 0 < t_obs < t_pre, got t_obs={t_obs}, t_pre={t_pre}")
    if stride < 1:
        raise ConfigError(f"stride must be >= 1, got {stride}")
    if not scene.tracks:
        return []
    step = scene.frame_step()
    first = min(int(t.frames[0]) for t in scene.tracks)
    last = max(int(t.frames[-1]) for t in scene.tracks)
    lookup = [dict(zip(t.frames.tolist(), range(len(t.frames)))) for t in scene.tracks]
    windows = []
    start = first
    while start + (t_pre - 1) * step <= last:
        wanted = [start + m * step for m in range(t_pre)]
        coords, types, ids = [], [], []
        for track, idx in zip(scene.tracks, lookup):
            rows = [idx.get(f) for f in wanted]
            if any(r is None for r in rows):
                continue
            coords.append(track.positions[rows, 1:])
            types.append(track.agent_type)
            ids.append(track.agent_id)
        if coords:
            arr = np.stack(coords)
            windows.append(TrajectoryWindow(
                domain_id=scene.domain_id, t_obs=t_obs, t_pre=t_pre,
                past=arr[:, :t_obs].copy(), future=arr[:, t_obs:].copy(),
                agent_types=types, agent_ids=ids, start_frame=start,
                window_id=f"{scene.domain_id}:{start}",
            ))
        start += stride * step
    return windows


def relativize(window: TrajectoryWindow) -> Tuple[TrajectoryWindow, np.ndarray]:
    """Shift coordinates so the valid agents' mean last-observed position is the origin."""
    mask = np.asarray(window.mask, dtype=bool)
    if not mask.any():
        raise UsageError(f"window {window.window_id!r} has no valid agents")
    ref = window.past[mask, -1].mean(axis=0)
    out = TrajectoryWindow(
        domain_id=window.domain_id, t_obs=window.t_obs, t_pre=window.t_pre,
        past=window.past - ref, future=window.future - ref,
        agent_types=list(window.agent_types), agent_ids=list(window.agent_ids),
        mask=mask.copy(), start_frame=window.start_frame, window_id=window.window_id,
        reference_point=window.reference_point + ref,
    )
    return out, ref


def domain_statistics(windows: Sequence[TrajectoryWindow], frame_dt: float) -> DomainStats:
    if not windows:
        raise UsageError("domain_statistics needs at least one window")
    counts, speeds, accels = [], [], []
    for w in windows:
        mask = np.asarray(w.mask, dtype=bool)
        counts.append(mask.sum())
        traj = np.concatenate([w.past, w.future], axis=1)[mask]
        vel = np.diff(traj, axis=1) / frame_dt
        speeds.append(np.linalg.norm(vel, axis=-1).ravel())
        if vel.shape[1] > 1:
            accels.append((np.linalg.norm(np.diff(vel, axis=1), axis=-1) / frame_dt).ravel())
    speed = np.concatenate(speeds)
    accel = np.concatenate(accels) if accels else np.zeros(1)
    return DomainStats(float(np.mean(counts)), float(speed.mean()) if speed.size else 0.0,
                       float(accel.mean()) if accel.size else 0.0)


# ------------------------------------------------------------------- synthesis

def synth_generate(spec: SynthDomainSpec, n_scenes: int, frames_per_scene: int, seed: int) -> List[Scene]:
    """Simulate ``n_scenes`` scenes of goal-seeking agents with pairwise repulsion.

    Each agent walks at a fixed preferred speed ~ N(speed_mean, speed_std)
    (clipped at 0), steers toward its goal with gain ``goal_attraction``,
    receives heading noise uniform in ``[-turn_rate, turn_rate]`` per step and
    is pushed away from agents closer than ``avoidance_radius``. Once an agent
    reaches its goal it keeps its heading.
    """
    spec.validate()
    if n_scenes < 1:
        raise ConfigError("n_scenes must be >= 1")
    if frames_per_scene < 2:
        raise ConfigError("frames_per_scene must be >= 2")
    rng = np.random.default_rng([seed, spec.seed_offset])
    x0, y0, x1, y1 = spec.arena
    lo_corner = np.array([x0, y0])
    size = np.array([x1 - x0, y1 - y0])
    lo, hi = spec.agents_per_scene
    scenes = []
    for s in range(n_scenes):
        n = int(rng.integers(lo, hi + 1))
        start = lo_corner + rng.random((n, 2)) * size
        goal = lo_corner + rng.random((n, 2)) * size
        # keep goals away from the start so agents have somewhere to go
        too_close = np.linalg.norm(goal - start, axis=1) < 0.25 * size.min()
        goal[too_close] = lo_corner + size - (start[too_close] - lo_corner)
        speed = np.maximum(rng.normal(spec.speed_mean, spec.speed_std, n), 0.0) if spec.speed_std > 0 \
            else np.full(n, float(spec.speed_mean))
        heading = np.arctan2(goal[:, 1] - start[:, 1], goal[:, 0] - start[:, 0])
        if spec.turn_rate > 0:
            noise = rng.uniform(-spec.turn_rate, spec.turn_rate, (frames_per_scene - 1, n))
        else:
            noise = np.zeros((frames_per_scene - 1, n))
        traj = kernels.social_force_rollout(
            np.ascontiguousarray(start), np.ascontiguousarray(heading), np.ascontiguousarray(speed),
            np.ascontiguousarray(goal), np.ascontiguousarray(noise), float(spec.frame_dt),
            float(spec.goal_attraction), float(spec.avoidance_strength), float(spec.avoidance_radius))
        frames = np.arange(frames_per_scene, dtype=np.float64)
        tracks = [AgentTrack(i, np.column_stack([frames, traj[:, i, 0], traj[:, i, 1]])) for i in range(n)]
        scenes.append(Scene(spec.domain_id, spec.frame_dt, tracks))
    return scenes


# --------------------------------------------------------------- split/batches

def leave_one_out_split(domains, held_out: str):
    """Partition ``(domain_id, windows)`` pairs into sources and the held-out target."""
    domains = list(domains.items()) if isinstance(domains, dict) else list(domains)
    ids = [d for d, _ in domains]
    if len(ids) < 2:
        raise UsageError("leave-one-out needs at least two domains")
    if held_out not in ids:
        raise UsageError(f"unknown held-out domain {held_out!r}; have {ids}")
    sources = [(d, w) for d, w in domains if d != held_out]
    target = next((d, w) for d, w in domains if d == held_out)
    return sources, target


@dataclass
class Batch:
    """Rectangular stack of relativized windows; slot ``[w, n]`` valid iff ``mask[w, n]``."""

    past: np.ndarray  # (W, N, t_obs, 2)
    future: np.ndarray  # (W, N, t_fut, 2)
    mask: np.ndarray  # (W, N) bool
    types: np.ndarray  # (W, N) int codes into AGENT_TYPES
    reference: np.ndarray  # (W, 2)
    window_ids: List[str]
    domain_ids: List[str]

    @property
    def n_agents(self) -> int:
        return int(self.mask.sum())

    @classmethod
    def from_windows(cls, windows: Sequence[TrajectoryWindow], n_max: Optional[int] = None) -> "Batch":
        if not windows:
            raise UsageError("cannot batch zero windows")
        n_max = n_max or max(len(w.past) for w in windows)
        t_obs, t_fut = windows[0].past.shape[1], windows[0].future.shape[1]
        W = len(windows)
        past = np.zeros((W, n_max, t_obs, 2))
        fut = np.zeros((W, n_max, t_fut, 2))
        mask = np.zeros((W, n_max), dtype=bool)
        types = np.zeros((W, n_max), dtype=np.int64)
        ref = np.zeros((W, 2))
        for i, w in enumerate(windows):
            if w.past.shape[1] != t_obs or w.future.shape[1] != t_fut:
                raise UsageError("windows in a batch must share horizons")
            n = len(w.past)
            past[i, :n] = w.past
            fut[i, :n] = w.future
            mask[i, :n] = w.mask
            types[i, :n] = [AGENT_TYPE_INDEX[t] for t in w.agent_types]
            ref[i] = w.reference_point
        return cls(past, fut, mask, types, ref, [w.window_id for w in windows], [w.domain_id for w in windows])


def make_batches(windows: Sequence[TrajectoryWindow], batch_agent_budget: int = 512,
                 shuffle_seed: Optional[int] = 0) -> List[Batch]:
    """Greedy packing of windows into batches of at most ``batch_agent_budget`` valid agents.

    Windows are visited in a seeded random order (input order when
    ``shuffle_seed`` is None).
    """
    for w in windows:
        if w.n_agents > batch_agent_budget:
            raise ConfigError(f"window {w.window_id!r} has {w.n_agents} agents, over the budget of {batch_agent_budget}")
    order = list(range(len(windows)))
    if shuffle_seed is not None:
        order = np.random.default_rng(shuffle_seed).permutation(len(windows)).tolist()
    groups, cur, total = [], [], 0
    for i in order:
        n = windows[i].n_agents
        if cur and total + n > batch_agent_budget:
            groups.append(cur)
            cur, total = [], 0
        cur.append(windows[i])
        total += n
    if cur:
        groups.append(cur)
    return [Batch.from_windows(g) for g in groups]
