"""Static micro-batch schedule generation and rule validation.

Two schedule families are generated for a (P, N_m) pipeline under a uniform
per-stage time model (T_f forward, T_b backward, T_r recompute):

* ``varuna``: produced by simulating the three scheduling rules with zero
  network delay. Backward is preferred whenever ready (rule 3); a recompute is
  placed just in time, completing exactly when the matching gradient arrives
  from downstream (rule 1, read as "recompute start <= gradient arrival -
  T_r"); once a recompute finishes the stage waits unconditionally for the
  matching backward (rule 2). A forward is used as filler only when it fits
  entirely before the next recompute deadline, which spreads forwards (and
  idle slack) throughout the schedule. The last stage performs backward
  directly after forward and never recomputes.

* ``gpipe``: all forwards flow through the pipeline first, then recompute +
  backward pairs drain in reverse micro-batch order; the last stage skips
  recompute only for the final micro-batch, whose activations are still live.

Schedules are ordered task lists, not timestamped plans; timing under real
network conditions belongs to the simulator. Where the rules leave order
underdetermined (several forwards ready, no backward ready) the lowest
micro-batch index runs first.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass
from functools import cached_property, lru_cache
from typing import Dict, List, NamedTuple, Optional, Tuple

import numpy as np

from .core import (
    ConfigError,
    KIND_BACKWARD,
    KIND_CODES,
    KIND_FORWARD,
    KIND_NAMES,
    KIND_RECOMPUTE,
    us_from_seconds,
)

FORWARD = "F"
BACKWARD = "B"
RECOMPUTE = "R"

POLICY_VARUNA = "varuna"
POLICY_GPIPE = "gpipe"


class Task(NamedTuple):
    kind: str  # F | B | R
    micro_batch: int  # 1-based
    stage: int  # 1-based


@dataclass(frozen=True, eq=False)
class Schedule:
    """Per-stage ordered task lists in flat array form: ``kinds``/``mbs`` hold
    stage k's tasks (0-based micro-batches, core kind codes) at positions
    ``offsets[k]:offsets[k+1]``. ``stage_tasks`` is the same data as Task
    tuples for inspection and serialization."""

    policy: str
    pipeline_depth: int
    num_micro_batches: int
    kinds: np.ndarray
    mbs: np.ndarray
    offsets: np.ndarray
    forward_us: int
    backward_us: int
    recompute_us: int

    @cached_property
    def stage_tasks(self) -> Tuple[Tuple[Task, ...], ...]:
        out = []
        kinds = self.kinds.tolist()
        mbs = self.mbs.tolist()
        for k in range(self.pipeline_depth):
            lo, hi = int(self.offsets[k]), int(self.offsets[k + 1])
            out.append(tuple(
                Task(KIND_NAMES[kinds[i]], mbs[i] + 1, k + 1) for i in range(lo, hi)
            ))
        return tuple(out)

    def in_flight_bound(self, stage: int) -> int:
        """Max stashed micro-batches at ``stage`` (1-based): the largest
        forward-minus-backward count over any prefix of the stage's task list.
        List-order property, independent of timing."""
        lo, hi = int(self.offsets[stage - 1]), int(self.offsets[stage])
        kinds = self.kinds[lo:hi]
        delta = np.where(kinds == KIND_FORWARD, 1, 0) - np.where(kinds == KIND_BACKWARD, 1, 0)
        if len(delta) == 0:
            return 0
        return max(int(np.max(np.cumsum(delta))), 0)


def _pack(policy: str, p: int, n: int, lists: List[List[Tuple[int, int]]],
          tf: int, tb: int, tr: int) -> Schedule:
    offsets = np.zeros(p + 1, dtype=np.int64)
    for k in range(p):
        offsets[k + 1] = offsets[k] + len(lists[k])
    kinds = np.empty(int(offsets[p]), dtype=np.int64)
    mbs = np.empty(int(offsets[p]), dtype=np.int64)
    pos = 0
    for k in range(p):
        for kind, mb in lists[k]:
            kinds[pos] = kind
            mbs[pos] = mb
            pos += 1
    return Schedule(
        policy=policy, pipeline_depth=p, num_micro_batches=n,
        kinds=kinds, mbs=mbs, offsets=offsets,
        forward_us=tf, backward_us=tb, recompute_us=tr,
    )


@dataclass(frozen=True)
class RuleViolation:
    stage: int  # 1-based
    micro_batch: int
    rule: str  # "structure" | "rule1" | "rule2" | "rule3"
    message: str


@lru_cache(maxsize=512)
def generate_varuna_schedule(
    pipeline_depth: int,
    num_micro_batches: int,
    forward_s: float,
    backward_s: float,
    recompute_s: float,
) -> Schedule:
    p, n = pipeline_depth, num_micro_batches
    if p < 1 or n < 1:
        raise ConfigError("schedule: P and N_m must be >= 1")
    tf = us_from_seconds(forward_s)
    tb = us_from_seconds(backward_s)
    tr = us_from_seconds(recompute_s)
    if min(tf, tb, tr) <= 0:
        raise ConfigError("schedule: task times must be > 0")
    lists = _simulate_rules(p, n, tf, tb, tr)
    return _pack(POLICY_VARUNA, p, n, lists, tf, tb, tr)


@lru_cache(maxsize=512)
def generate_gpipe_schedule(
    pipeline_depth: int,
    num_micro_batches: int,
    forward_s: float,
    backward_s: float,
    recompute_s: float,
) -> Schedule:
    p, n = pipeline_depth, num_micro_batches
    if p < 1 or n < 1:
        raise ConfigError("schedule: P and N_m must be >= 1")
    tf = us_from_seconds(forward_s)
    tb = us_from_seconds(backward_s)
    tr = us_from_seconds(recompute_s)
    if min(tf, tb, tr) <= 0:
        raise ConfigError("schedule: task times must be > 0")
    lists = []
    for k in range(1, p + 1):
        tasks = [(KIND_FORWARD, j) for j in range(n)]
        if k == p:
            tasks.append((KIND_BACKWARD, n - 1))
            start = n - 2
        else:
            start = n - 1
        for j in range(start, -1, -1):
            tasks.append((KIND_RECOMPUTE, j))
            tasks.append((KIND_BACKWARD, j))
        lists.append(tasks)
    return _pack(POLICY_GPIPE, p, n, lists, tf, tb, tr)


def _simulate_rules(p: int, n: int, tf: int, tb: int, tr: int) -> List[List[Tuple[int, int]]]:
    """Zero-delay joint simulation of the rule set; returns per-stage task
    start order as (kind code, 0-based micro-batch) lists.

    Flat event loop: at each event time, finish running tasks, then let every
    stage (in index order) pick its next task per the rules. -1 encodes "not
    yet" in the arrival/deadline tables.
    """
    last = p - 1
    KF, KB, KR = KIND_FORWARD, KIND_BACKWARD, KIND_RECOMPUTE
    lists: List[List[Tuple[int, int]]] = [[] for _ in range(p)]
    busy_until = [0] * p
    running_kind = [-1] * p  # -1 = idle
    running_mb = [0] * p
    fwd_done = [0] * p  # forwards executed so far (prefix count)
    bwd_done = [0] * p
    act_time = [[0] * n if k == 0 else [-1] * n for k in range(p)]
    grad_time = [[-1] * n for _ in range(p)]
    deadline = [[-1] * n for _ in range(p)]
    rec_done = [[False] * n for _ in range(p)]
    locked = [-1] * p
    heap: List[int] = [0]
    push = heapq.heappush
    pop = heapq.heappop
    stages = range(p)

    while heap:
        now = pop(heap)
        while heap and heap[0] == now:
            pop(heap)
        for k in stages:
            if running_kind[k] >= 0 and busy_until[k] == now:
                kind = running_kind[k]
                mb = running_mb[k]
                running_kind[k] = -1
                if kind == KF:
                    fwd_done[k] += 1
                    if k + 1 < p:
                        act_time[k + 1][mb] = now
                elif kind == KR:
                    rec_done[k][mb] = True
                    locked[k] = mb
                else:
                    bwd_done[k] += 1
                    if k > 0:
                        grad_time[k - 1][mb] = now
        for k in stages:
            if running_kind[k] >= 0 or bwd_done[k] >= n:
                continue
            j = locked[k]
            if j >= 0:
                # Rule 2: after a recompute, wait unconditionally for its backward.
                g = grad_time[k][j]
                if 0 <= g <= now:
                    kind, mb, dur = KB, j, tb
                else:
                    continue
            else:
                j = bwd_done[k]
                kind = -1
                if k == last:
                    if fwd_done[k] > j:
                        kind, mb, dur = KB, j, tb  # rule 3: backward first
                else:
                    g = grad_time[k][j]
                    if 0 <= g <= now and rec_done[k][j]:
                        kind, mb, dur = KB, j, tb
                    elif fwd_done[k] > j and not rec_done[k][j]:
                        if 0 <= g <= now:
                            kind, mb, dur = KR, j, tr  # gradient here: late
                        else:
                            dl = deadline[k][j]
                            if dl >= 0:
                                if now >= dl:
                                    kind, mb, dur = KR, j, tr
                                else:
                                    f = fwd_done[k]
                                    if (f < n and 0 <= act_time[k][f] <= now
                                            and now + tf <= dl):
                                        kind, mb, dur = KF, f, tf
                                    else:
                                        push(heap, dl)
                                        continue
                if kind < 0:
                    f = fwd_done[k]
                    if f < n and 0 <= act_time[k][f] <= now:
                        kind, mb, dur = KF, f, tf
                    else:
                        continue
            lists[k].append((kind, mb))
            running_kind[k] = kind
            running_mb[k] = mb
            busy_until[k] = now + dur
            push(heap, now + dur)
            if kind == KB:
                locked[k] = -1
                if k > 0:
                    # Downstream backward start fixes the recompute deadline above.
                    dl = now + tb - tr
                    deadline[k - 1][mb] = dl
                    push(heap, dl if dl > now else now)

    for k in stages:
        if bwd_done[k] != n:
            raise AssertionError(f"rule simulation deadlocked at stage {k + 1}")
    return lists


def schedule_from_tasks(
    policy: str,
    stage_task_lists,
    forward_s: float,
    backward_s: float,
    recompute_s: float,
) -> Schedule:
    """Build a schedule from explicit per-stage ``(kind letter, 1-based
    micro-batch)`` lists; mainly for tests and hand-written schedules."""
    p = len(stage_task_lists)
    n = max((mb for tasks in stage_task_lists for _, mb in tasks), default=0)
    lists = [[(KIND_CODES[kind], mb - 1) for kind, mb in tasks]
             for tasks in stage_task_lists]
    return _pack(
        policy, p, n, lists,
        us_from_seconds(forward_s), us_from_seconds(backward_s),
        us_from_seconds(recompute_s),
    )


def replay_uniform(schedule: Schedule) -> Dict[Task, Tuple[int, int]]:
    """Execute the static task lists in order under the schedule's uniform
    time model with zero network delay; returns (start_us, end_us) per task.

    Each stage runs its list sequentially; a task additionally waits for its
    cross-stage dependency (activation from above for F, gradient from below
    for B). Independent of the generator's internal timing.
    """
    p, n = schedule.pipeline_depth, schedule.num_micro_batches
    dur = {FORWARD: schedule.forward_us, BACKWARD: schedule.backward_us,
           RECOMPUTE: schedule.recompute_us}
    times: Dict[Task, Tuple[int, int]] = {}
    ptr = [0] * p
    stage_free = [0] * p
    progress = True
    while progress:
        progress = False
        for k in range(p):
            while ptr[k] < len(schedule.stage_tasks[k]):
                task = schedule.stage_tasks[k][ptr[k]]
                dep = _dep_end(task, schedule, times)
                if dep is None:
                    break
                begin = max(stage_free[k], dep)
                end = begin + dur[task.kind]
                times[task] = (begin, end)
                stage_free[k] = end
                ptr[k] += 1
                progress = True
    for k in range(p):
        if ptr[k] != len(schedule.stage_tasks[k]):
            task = schedule.stage_tasks[k][ptr[k]]
            raise ConfigError(
                f"schedule: stage {k + 1} deadlocks at {task.kind}{task.micro_batch}"
                " (unsatisfiable dependency order)"
            )
    return times


def _dep_end(task: Task, schedule: Schedule, times: Dict[Task, Tuple[int, int]]) -> Optional[int]:
    """End time of the cross/intra-stage dependency of ``task``; None if the
    dependency has not executed yet. 0 means no dependency."""
    k, j = task.stage, task.micro_batch
    p = schedule.pipeline_depth
    if task.kind == FORWARD:
        if k == 1:
            return 0
        up = times.get(Task(FORWARD, j, k - 1))
        return None if up is None else up[1]
    if task.kind == RECOMPUTE:
        own = times.get(Task(FORWARD, j, k))
        return None if own is None else own[1]
    # Backward.
    if k == p:
        own = times.get(Task(FORWARD, j, k))
        return None if own is None else own[1]
    down = times.get(Task(BACKWARD, j, k + 1))
    rec = times.get(Task(RECOMPUTE, j, k))
    if down is None or rec is None:
        return None
    return max(down[1], rec[1])


def makespan_us(schedule: Schedule) -> int:
    """Zero-delay makespan of the static schedule under its uniform model."""
    times = replay_uniform(schedule)
    return max(end for _, end in times.values())


def validate_schedule(schedule: Schedule) -> List[RuleViolation]:
    """Replay the schedule and report every rule violation.

    Checks structure (task counts, recompute placement for the varuna
    policy), rule 1 (recompute must complete by gradient arrival), rule 2
    (nothing between a recompute and its backward) and rule 3 (never run
    another task while a backward is ready).
    """
    violations: List[RuleViolation] = []
    p, n = schedule.pipeline_depth, schedule.num_micro_batches

    for k in range(1, p + 1):
        tasks = schedule.stage_tasks[k - 1]
        for kind, expected in ((FORWARD, n), (BACKWARD, n)):
            count = sum(1 for t in tasks if t.kind == kind)
            if count != expected:
                violations.append(RuleViolation(k, 0, "structure",
                                                f"stage {k} has {count} {kind} tasks, expected {expected}"))
        rec = sum(1 for t in tasks if t.kind == RECOMPUTE)
        if schedule.policy == POLICY_VARUNA:
            expected_rec = 0 if (k == p or p == 1) else n
            if rec != expected_rec:
                violations.append(RuleViolation(k, 0, "structure",
                                                f"stage {k} has {rec} recomputes, expected {expected_rec}"))
        # Rule 2 is structural on the list: R(j) immediately precedes B(j).
        for idx, task in enumerate(tasks):
            if task.kind == RECOMPUTE:
                nxt = tasks[idx + 1] if idx + 1 < len(tasks) else None
                if nxt is None or nxt.kind != BACKWARD or nxt.micro_batch != task.micro_batch:
                    violations.append(RuleViolation(k, task.micro_batch, "rule2",
                                                    f"stage {k}: task between R{task.micro_batch} "
                                                    f"and B{task.micro_batch}"))
    if violations:
        return violations

    try:
        times = replay_uniform(schedule)
    except ConfigError as e:
        return [RuleViolation(0, 0, "structure", str(e))]

    # Rule 1: recompute must finish by the time the gradient arrives,
    # i.e. start <= arrival - T_r under the earliest-completion reading.
    for k in range(1, p):
        for j in range(1, n + 1):
            rec = times.get(Task(RECOMPUTE, j, k))
            down = times.get(Task(BACKWARD, j, k + 1))
            if rec is None or down is None:
                continue
            arrival = down[1]
            if rec[0] > arrival - schedule.recompute_us:
                violations.append(RuleViolation(k, j, "rule1",
                                                f"stage {k}: R{j} starts at {rec[0]}us, "
                                                f"after gradient arrival {arrival}us - T_r"))

    # Rule 3: when a stage starts a non-backward task, no backward may be
    # ready (dependencies complete and not yet run).
    for k in range(1, p + 1):
        started: Dict[int, int] = {}
        for task in schedule.stage_tasks[k - 1]:
            if task.kind == BACKWARD:
                started[task.micro_batch] = times[task][0]
        for task in schedule.stage_tasks[k - 1]:
            if task.kind == BACKWARD:
                continue
            begin = times[task][0]
            for j in range(1, n + 1):
                b_start = started.get(j)
                if b_start is not None and b_start <= begin:
                    continue  # that backward already ran
                ready_at = _backward_ready_at(j, k, schedule, times)
                if ready_at is not None and ready_at <= begin:
                    violations.append(RuleViolation(k, task.micro_batch, "rule3",
                                                    f"stage {k}: ran {task.kind}{task.micro_batch} at "
                                                    f"{begin}us while B{j} was ready"))
                    break
    return violations


def _backward_ready_at(j: int, k: int, schedule: Schedule,
                       times: Dict[Task, Tuple[int, int]]) -> Optional[int]:
    p = schedule.pipeline_depth
    if k == p:
        own = times.get(Task(FORWARD, j, k))
        return None if own is None else own[1]
    down = times.get(Task(BACKWARD, j, k + 1))
    rec = times.get(Task(RECOMPUTE, j, k))
    if down is None or rec is None:
        return None
    return max(down[1], rec[1])


def schedule_to_csv(schedule: Schedule) -> str:
    """One line per task: ``stage,seq,kind,microbatch`` (both indices 1-based)."""
    lines = ["stage,seq,kind,microbatch"]
    for k in range(1, schedule.pipeline_depth + 1):
        for seq, task in enumerate(schedule.stage_tasks[k - 1], start=1):
            lines.append(f"{k},{seq},{task.kind},{task.micro_batch}")
    return "\n".join(lines) + "\n"


def schedule_from_csv(
    text: str,
    policy: str,
    forward_s: float,
    backward_s: float,
    recompute_s: float,
) -> Schedule:
    rows: Dict[int, List[Tuple[int, str, int]]] = {}
    lines = [ln for ln in text.strip().splitlines() if ln.strip()]
    if lines and lines[0].startswith("stage"):
        lines = lines[1:]
    n = 0
    for ln in lines:
        parts = ln.split(",")
        if len(parts) != 4:
            raise ConfigError(f"schedule csv: malformed line {ln!r}")
        stage, seq, kind, mb = int(parts[0]), int(parts[1]), parts[2], int(parts[3])
        if kind not in (FORWARD, BACKWARD, RECOMPUTE):
            raise ConfigError(f"schedule csv: unknown kind {kind!r}")
        rows.setdefault(stage, []).append((seq, kind, mb))
        n = max(n, mb)
    if not rows or set(rows) != set(range(1, max(rows) + 1)):
        raise ConfigError("schedule csv: stages must be contiguous from 1")
    p = max(rows)
    lists = []
    for k in range(1, p + 1):
        ordered = sorted(rows[k])
        lists.append([(KIND_CODES[kind], mb - 1) for _, kind, mb in ordered])
    return _pack(
        policy, p, n, lists,
        us_from_seconds(forward_s), us_from_seconds(backward_s),
        us_from_seconds(recompute_s),
    )
