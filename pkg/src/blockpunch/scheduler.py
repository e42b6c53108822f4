"""Two-lane branch scheduling: a fast-parallel lane "G" and a general lane "C".

Branches assigned to one lane run back to back; the two lanes run concurrently.
"""
from __future__ import annotations

import itertools
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .graph import ModelGraph

PROFILE_MAGIC = "blockpunch-profile"
PROFILE_VERSION = 1
MAX_ENUMERATED_BRANCHES = 20


class ProfileError(ValueError):
    pass


@dataclass(frozen=True)
class DeviceProfile:
    """Per-branch lane times (ms) plus a copy model ``tau(bytes) = base + bytes / bandwidth``."""

    branch_times: dict  # structure id -> tuple of (t_g, t_c) per branch
    copy_base: float = 0.0
    copy_bandwidth: float = float("inf")  # bytes per ms
    sequential_ms: float = 0.0

    def __post_init__(self):
        for sid, times in self.branch_times.items():
            if any(t < 0 for pair in times for t in pair):
                raise ProfileError(f"negative branch time in structure {sid}")
        if self.copy_base < 0 or self.copy_bandwidth <= 0 or self.sequential_ms < 0:
            raise ProfileError("copy model needs base >= 0 and bandwidth > 0")

    def copy_time(self, nbytes: float) -> float:
        return self.copy_base + nbytes / self.copy_bandwidth

    def times(self, structure_id):
        try:
            return self.branch_times[structure_id]
        except KeyError:
            raise ProfileError(f"profile has no entry for structure '{structure_id}'") from None


@dataclass(frozen=True)
class Decision:
    assignment: tuple  # "G" / "C" per branch, in the structure's branch order
    makespan: float
    t_par: float | None = None
    t_ser: float | None = None


@dataclass
class Schedule:
    assignments: dict = field(default_factory=dict)  # structure id -> tuple of lanes
    makespans: dict = field(default_factory=dict)
    sequential_ms: float = 0.0

    @property
    def total(self) -> float:
        return self.sequential_ms + sum(self.makespans.values())

    def lane_of(self, layer_id, model: ModelGraph) -> str:
        for bs in model.branch_structures:
            for branch, lane in zip(bs.branches, self.assignments.get(bs.id, ())):
                if layer_id in branch:
                    return lane
        return "G"


def conv_branch_makespans(t_g1, t_g2, t_c2, tau):
    """(T_par, T_ser) with branch 1 on G and branch 2 on C or after it on G."""
    return max(t_g1, t_c2 + tau), t_g1 + t_g2


def decide_conv_branch(t_g, t_c, tau) -> Decision:
    """Two CONV branches. ``tau`` is the copy time for each branch if it ran on C.

    The branch slower on G always runs on G; the other goes to C unless that
    lengthens the makespan (ties go to C, leaving the fast lane free).
    """
    if len(t_g) != 2 or len(t_c) != 2:
        raise ValueError("conv-branch decision needs exactly two branches")
    taus = tau if isinstance(tau, (tuple, list)) else (tau, tau)
    heavy = 0 if t_g[0] >= t_g[1] else 1
    light = 1 - heavy
    t_par, t_ser = conv_branch_makespans(t_g[heavy], t_g[light], t_c[light], taus[light])
    lanes = ["G", "G"]
    if t_par <= t_ser:
        lanes[light] = "C"
    return Decision(tuple(lanes), min(t_par, t_ser), t_par, t_ser)


def nonconv_makespan(assignment, t_g, t_c) -> float:
    cpu = gpu = 0.0
    for lane, g, c in zip(assignment, t_g, t_c):
        if lane == "C":
            cpu += c
        else:
            gpu += g
    return max(cpu, gpu)


def decide_nonconv_branches(t_g, t_c) -> Decision:
    """Exhaustive 2^k search; copy time is not charged.

    Ties prefer fewer G branches, then the lexicographically smallest lane tuple.
    """
    k = len(t_g)
    if k != len(t_c) or k == 0:
        raise ValueError("need one (t_g, t_c) pair per branch")
    if k > MAX_ENUMERATED_BRANCHES:
        raise ValueError(f"{k} branches exceed the enumeration limit {MAX_ENUMERATED_BRANCHES}")
    codes = np.arange(1 << k, dtype=np.int64)
    bits = (codes[:, None] >> (k - 1 - np.arange(k))) & 1  # column i: branch i on G
    cpu = np.zeros(codes.size)
    gpu = np.zeros(codes.size)
    for i in range(k):  # accumulate in branch order so sums match a scalar loop bit for bit
        cpu = cpu + np.where(bits[:, i] == 0, float(t_c[i]), 0.0)
        gpu = gpu + np.where(bits[:, i] == 1, float(t_g[i]), 0.0)
    total = np.maximum(cpu, gpu)
    best = total.min()
    tied = np.flatnonzero(total == best)
    # codes read branch 0 as the most significant bit, so numeric order is lexicographic
    pick = min(tied, key=lambda c: (int(bits[c].sum()), int(c)))
    lanes = tuple("G" if b else "C" for b in bits[pick])
    return Decision(lanes, float(best))


def decide_structure(profile: DeviceProfile, structure) -> Decision:
    times = profile.times(structure.id)
    if len(times) != len(structure.branches):
        raise ProfileError(
            f"structure {structure.id}: profile has {len(times)} branches, model has {len(structure.branches)}"
        )
    t_g = [t[0] for t in times]
    t_c = [t[1] for t in times]
    if structure.kind == "conv-branches":
        taus = [profile.copy_time(structure.bytes_for(i)) for i in range(len(times))]
        return decide_conv_branch(t_g, t_c, taus)
    return decide_nonconv_branches(t_g, t_c)


def schedule_model(model: ModelGraph, profile: DeviceProfile) -> Schedule:
    """Decide every branch structure independently and add the sequential remainder."""
    sched = Schedule(sequential_ms=profile.sequential_ms)
    for bs in model.branch_structures:
        d = decide_structure(profile, bs)
        sched.assignments[bs.id] = d.assignment
        sched.makespans[bs.id] = d.makespan
    return sched


def structure_options(profile: DeviceProfile, structure):
    """All (assignment, makespan) pairs the cost model allows for one structure."""
    times = profile.times(structure.id)
    t_g = [t[0] for t in times]
    t_c = [t[1] for t in times]
    if structure.kind == "conv-branches":
        d = decide_conv_branch(t_g, t_c, [profile.copy_time(structure.bytes_for(i)) for i in range(2)])
        heavy = 0 if t_g[0] >= t_g[1] else 1
        par = ["G", "G"]
        par[1 - heavy] = "C"
        return [(tuple(par), d.t_par), (("G", "G"), d.t_ser)]
    return [
        (lanes, nonconv_makespan(lanes, t_g, t_c))
        for lanes in itertools.product("CG", repeat=len(times))
    ]


# --------------------------------------------------------------------------
# measurement

COPY_SIZES = tuple(1 << k for k in range(12, 23, 2))  # bytes


def _median_ms(fn, repeats):
    samples = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        samples.append((time.perf_counter() - t0) * 1e3)
    return float(np.median(samples))


def measure_copy_model(sizes=COPY_SIZES, repeats=5):
    """Least-squares fit of buffer copy time (ms) against size (bytes)."""
    times = []
    for n in sizes:
        src = np.ones(max(n // 8, 1))
        dst = np.empty_like(src)
        times.append(_median_ms(lambda dst=dst, src=src: np.copyto(dst, src), repeats))
    slope, intercept = np.polyfit(np.asarray(sizes, dtype=float), times, 1)
    bandwidth = float(1.0 / slope) if slope > 0 else float("inf")
    return max(float(intercept), 0.0), bandwidth


def profile_branches(model: ModelGraph, packed: dict, x=None, repeats=5, backend=None,
                     fixture=None, seed=0) -> DeviceProfile:
    """Median-of-``repeats`` time of every branch on each lane, plus the copy model.

    With ``fixture`` set, times are read from that profile file instead, which
    keeps tests reproducible. C-lane runs go through a single-worker pool and
    each measurement waits for its result before the next starts.
    """
    if fixture is not None:
        return load_profile(fixture)
    from .runtime.executor import execute_layers

    if x is None:
        x = np.random.default_rng(seed).standard_normal(model.input_shape)
    x = np.asarray(x, dtype=np.float64)
    batch = x[None] if x.ndim == 3 else x
    values = {}
    order = [layer.id for layer in model.topological_order()]
    execute_layers(model, order, values, batch, packed, backend=backend)
    pos = {lid: i for i, lid in enumerate(order)}

    def timed(ids, lane, pool):
        scratch = dict(values)
        run = lambda: execute_layers(model, ids, scratch, batch, packed, lane, backend=backend)  # noqa: E731
        if lane == "C":
            return pool.submit(_median_ms, run, repeats).result()
        return _median_ms(run, repeats)

    times = {}
    in_structure = set()
    with ThreadPoolExecutor(1) as c_pool:
        for bs in model.branch_structures:
            in_structure.update(bs.layer_ids)
            per_branch = []
            for branch in bs.branches:
                ids = sorted(branch, key=pos.get)
                per_branch.append((timed(ids, "G", c_pool), timed(ids, "C", c_pool)))
            times[bs.id] = tuple(per_branch)
        rest = [lid for lid in order if lid not in in_structure]
        sequential = sum(timed([lid], "G", c_pool) for lid in rest)
    base, bandwidth = measure_copy_model(repeats=repeats)
    return DeviceProfile(times, base, bandwidth, sequential)


# --------------------------------------------------------------------------
# profile text format


def dumps_profile(profile: DeviceProfile) -> str:
    lines = [f"{PROFILE_MAGIC} {PROFILE_VERSION}"]
    lines.append(f"copy base={float(profile.copy_base)!r} bandwidth={float(profile.copy_bandwidth)!r}")
    lines.append(f"sequential ms={float(profile.sequential_ms)!r}")
    for sid, times in profile.branch_times.items():
        for i, (tg, tc) in enumerate(times):
            lines.append(f"branch structure={sid} index={i} t_g={float(tg)!r} t_c={float(tc)!r}")
    return "\n".join(lines) + "\n"


def save_profile(profile: DeviceProfile, path) -> None:
    Path(path).write_text(dumps_profile(profile))


def loads_profile(text: str) -> DeviceProfile:
    copy = {"base": 0.0, "bandwidth": float("inf")}
    sequential = 0.0
    entries: dict = {}
    header = False
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tokens = line.split()
        if not header:
            if tokens != [PROFILE_MAGIC, str(PROFILE_VERSION)]:
                raise ProfileError(f"line {lineno}: expected '{PROFILE_MAGIC} {PROFILE_VERSION}'")
            header = True
            continue
        try:
            fields = dict(tok.split("=", 1) for tok in tokens[1:])
        except ValueError:
            raise ProfileError(f"line {lineno}: expected key=value fields") from None
        try:
            if tokens[0] == "copy":
                copy.update({k: float(v) for k, v in fields.items()})
            elif tokens[0] == "sequential":
                sequential = float(fields["ms"])
            elif tokens[0] == "branch":
                idx = int(fields["index"])
                entries.setdefault(fields["structure"], {})[idx] = (float(fields["t_g"]), float(fields["t_c"]))
            else:
                raise ProfileError(f"line {lineno}: unknown record '{tokens[0]}'")
        except (KeyError, ValueError) as exc:
            if isinstance(exc, ProfileError):
                raise
            raise ProfileError(f"line {lineno}: bad or missing field ({exc})") from None
    if not header:
        raise ProfileError("empty profile")
    times = {}
    for sid, by_index in entries.items():
        if sorted(by_index) != list(range(len(by_index))):
            raise ProfileError(f"structure {sid}: branch indices must be 0..k-1")
        times[sid] = tuple(by_index[i] for i in range(len(by_index)))
    return DeviceProfile(times, copy["base"], copy["bandwidth"], sequential)


def load_profile(path) -> DeviceProfile:
    return loads_profile(Path(path).read_text())


def dumps_schedule(model: ModelGraph, schedule: Schedule) -> str:
    """Schedule report consumed by ``run_model``: one line per branch."""
    lines = ["blockpunch-schedule 1", f"sequential ms={float(schedule.sequential_ms)!r}"]
    for bs in model.branch_structures:
        lanes = schedule.assignments.get(bs.id)
        if lanes is None:
            continue
        lines.append(
            f"structure id={bs.id} kind={bs.kind} makespan={float(schedule.makespans[bs.id])!r} "
            f"lanes={''.join(lanes)}"
        )
    lines.append(f"total ms={float(schedule.total)!r}")
    return "\n".join(lines) + "\n"


def loads_schedule(text: str) -> Schedule:
    sched = Schedule()
    lines = [ln.strip() for ln in text.splitlines() if ln.strip() and not ln.startswith("#")]
    if not lines or lines[0] != "blockpunch-schedule 1":
        raise ProfileError("not a schedule file")
    for line in lines[1:]:
        tokens = line.split()
        fields = dict(tok.split("=", 1) for tok in tokens[1:])
        if tokens[0] == "sequential":
            sched.sequential_ms = float(fields["ms"])
        elif tokens[0] == "structure":
            sched.assignments[fields["id"]] = tuple(fields["lanes"])
            sched.makespans[fields["id"]] = float(fields["makespan"])
    return sched
