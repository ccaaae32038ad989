"""Pure-Python discrete-event kernel for one pipeline replica.

Semantics are shared with the compiled kernel (``_kernel.pyx``): integer
microsecond arithmetic only, so both produce bit-identical results. One
replica is P serial stage executors working through static task lists;
activations flow down (stage k to k+1), gradients flow up. A directed link
carries at most one in-flight transfer at a time when ``serialize_links`` is
set.

Non-opportunistic mode executes each stage's list strictly in order, starting
a task once its network dependency has arrived. Opportunistic mode follows
the list as the plan but deviates when the head is blocked or premature:
a recompute waits for its just-in-time start (the known gradient arrival
minus its own duration when the message is in flight, else the estimate set
when the downstream backward started), ready forwards fill the gap while
they fit in front of it, a blocked forward lets a due recompute/backward
pair jump ahead, and when gradients have queued up the stage paces the
backlog with one ready forward per pair so downstream stages keep receiving
activations. Forwards never stash beyond the plan's in-flight bound plus the
configured pad. Rule 2 (wait unconditionally after a recompute) and rule 3
(a ready backward always wins) hold throughout; at zero network delay the
policy reproduces the static plan exactly.

Task kind codes (also the within-time tie-break priority): 0 backward,
1 recompute, 2 forward.
"""

from __future__ import annotations

import heapq

import numpy as np

from ..core import KIND_BACKWARD as KIND_B
from ..core import KIND_FORWARD as KIND_F
from ..core import KIND_RECOMPUTE as KIND_R

_NOT_ARRIVED = -1


def run_replica(
    n_stages,
    n_micro,
    kinds,
    mbs,
    offsets,
    fwd_us,
    bwd_us,
    rec_us,
    act_tx_us,
    grad_tx_us,
    exp_grad_tx_us,
    in_act_bytes,
    work_bytes,
    stash_cap,
    opportunistic,
    serialize_links,
):
    P = int(n_stages)
    N = int(n_micro)
    last = P - 1
    n_tasks = int(offsets[P])

    # Per-task execution record, filled in start order.
    out_stage = np.empty(n_tasks, dtype=np.int64)
    out_kind = np.empty(n_tasks, dtype=np.int64)
    out_mb = np.empty(n_tasks, dtype=np.int64)
    out_start = np.empty(n_tasks, dtype=np.int64)
    out_end = np.empty(n_tasks, dtype=np.int64)
    n_out = 0

    n_msgs = 2 * (P - 1) * N
    msg_send = np.empty(n_msgs, dtype=np.int64)
    msg_grant = np.empty(n_msgs, dtype=np.int64)
    msg_arrive = np.empty(n_msgs, dtype=np.int64)
    msg_boundary = np.empty(n_msgs, dtype=np.int64)
    msg_dir = np.empty(n_msgs, dtype=np.int64)  # 0 = activation, 1 = gradient
    msg_mb = np.empty(n_msgs, dtype=np.int64)
    n_msg = 0

    kinds_l = kinds.tolist()
    mbs_l = mbs.tolist()
    ptr = [int(offsets[k]) for k in range(P)]
    stage_end = [int(offsets[k + 1]) for k in range(P)]
    executed = [False] * n_tasks
    running_kind = [-1] * P
    running_mb = [-1] * P
    busy_until = [0] * P
    locked_mb = [-1] * P
    last_done = [-1] * P  # kind of the most recently completed task
    fwd_exec = [0] * P  # forwards executed so far; forwards run in mb order
    bwd_exec = [0] * P  # backwards executed so far, in list order

    # Task positions per stage: forwards by micro-batch; backwards in list
    # order; recompute by micro-batch.
    fwd_pos = [[-1] * N for _ in range(P)]
    bwd_order_pos = [[-1] * N for _ in range(P)]
    bwd_order_mb = [[-1] * N for _ in range(P)]
    rec_pos = [[-1] * N for _ in range(P)]
    for k in range(P):
        nf = nb = 0
        for pos in range(int(offsets[k]), int(offsets[k + 1])):
            kind = kinds_l[pos]
            mb = mbs_l[pos]
            if kind == KIND_F:
                fwd_pos[k][nf] = pos
                nf += 1
            elif kind == KIND_B:
                bwd_order_pos[k][nb] = pos
                bwd_order_mb[k][nb] = mb
                nb += 1
            else:
                rec_pos[k][mb] = pos

    # Arrival times; value >= 0 means the message is in flight or arrived.
    act_arr = [[_NOT_ARRIVED] * N for _ in range(P)]
    grad_arr = [[_NOT_ARRIVED] * N for _ in range(P)]
    act_arr[0] = [0] * N  # stage 0 inputs available from the start
    # Estimated just-in-time recompute start (rule 1), set when the downstream
    # backward starts; -1 while unknown.
    deadline = [[-1] * N for _ in range(P)]
    act_link_free = [0] * max(P - 1, 1)
    grad_link_free = [0] * max(P - 1, 1)

    stash = [0] * P
    sets = [0] * P
    peak_stash = [0] * P
    peak_sets = [0] * P
    peak_mem = [0] * P
    last_bwd_end = [0] * P

    heap = [(0, k) for k in range(P)]
    heapq.heapify(heap)
    push = heapq.heappush

    def start_task(k, pos, now):
        nonlocal n_out
        kind = kinds_l[pos]
        mb = mbs_l[pos]
        if kind == KIND_F:
            dur = int(fwd_us[k])
        elif kind == KIND_B:
            dur = int(bwd_us[k])
        else:
            dur = int(rec_us[k])
        executed[pos] = True
        running_kind[k] = kind
        running_mb[k] = mb
        busy_until[k] = now + dur
        out_stage[n_out] = k
        out_kind[n_out] = kind
        out_mb[n_out] = mb
        out_start[n_out] = now
        out_end[n_out] = now + dur
        n_out += 1
        if kind == KIND_F:
            fwd_exec[k] += 1
            stash[k] += 1
            sets[k] += 1
            if stash[k] > peak_stash[k]:
                peak_stash[k] = stash[k]
            if sets[k] > peak_sets[k]:
                peak_sets[k] = sets[k]
            cur = stash[k] * int(in_act_bytes[k]) + sets[k] * int(work_bytes[k])
            if cur > peak_mem[k]:
                peak_mem[k] = cur
        elif kind == KIND_R:
            sets[k] += 1
            if sets[k] > peak_sets[k]:
                peak_sets[k] = sets[k]
            cur = stash[k] * int(in_act_bytes[k]) + sets[k] * int(work_bytes[k])
            if cur > peak_mem[k]:
                peak_mem[k] = cur
        else:
            locked_mb[k] = -1
            if k > 0:
                # Rule 1: the stage below should finish recomputing when this
                # backward's gradient lands (estimated with the mean transfer).
                dl = now + dur + int(exp_grad_tx_us[k - 1]) - int(rec_us[k - 1])
                deadline[k - 1][mb] = dl
                push(heap, (dl if dl > now else now, k - 1))
        push(heap, (now + dur, k))

    def send(boundary, direction, mb, now):
        nonlocal n_msg
        if direction == 0:
            dur = int(act_tx_us[boundary * N + mb])
            free = act_link_free
        else:
            dur = int(grad_tx_us[boundary * N + mb])
            free = grad_link_free
        if serialize_links:
            grant = now if free[boundary] <= now else free[boundary]
            arrive = grant + dur
            free[boundary] = arrive
        else:
            grant = now
            arrive = now + dur
        msg_send[n_msg] = now
        msg_grant[n_msg] = grant
        msg_arrive[n_msg] = arrive
        msg_boundary[n_msg] = boundary
        msg_dir[n_msg] = direction
        msg_mb[n_msg] = mb
        n_msg += 1
        if direction == 0:
            act_arr[boundary + 1][mb] = arrive
            push(heap, (arrive, boundary + 1))
        else:
            grad_arr[boundary][mb] = arrive
            push(heap, (arrive, boundary))
            # Wake the receiver at the just-in-time recompute start.
            jit = arrive - int(rec_us[boundary])
            push(heap, (jit if jit > now else now, boundary))

    def complete(k, now):
        kind = running_kind[k]
        mb = running_mb[k]
        running_kind[k] = -1
        running_mb[k] = -1
        last_done[k] = kind
        if kind == KIND_F:
            if k < last:
                sets[k] -= 1  # checkpointing: intermediates discarded
                send(k, 0, mb, now)
        elif kind == KIND_R:
            locked_mb[k] = mb
        else:
            sets[k] -= 1
            stash[k] -= 1
            bwd_exec[k] += 1
            last_bwd_end[k] = now
            if k > 0:
                send(k - 1, 1, mb, now)

    _FAR = 1 << 60

    def rec_due_at(k, mb, now):
        """Just-in-time start for R(mb) at stage k: gradient arrival minus
        T_r when the arrival is known (message in flight), else the estimate
        set when the downstream backward started, else far future."""
        g = grad_arr[k][mb]
        if g >= 0:
            if g <= now:
                return now  # already late
            return g - int(rec_us[k])
        dl = deadline[k][mb]
        return dl if dl >= 0 else _FAR

    def decide(k, now):
        if running_kind[k] >= 0:
            return
        j = locked_mb[k]
        if j >= 0:
            # Rule 2: only the matching backward may run next. The last
            # stage's loss is local, so its backward needs no gradient.
            if k == last or 0 <= grad_arr[k][j] <= now:
                start_task(k, bwd_order_pos[k][bwd_exec[k]], now)
            return
        p = ptr[k]
        end = stage_end[k]
        while p < end and executed[p]:
            p += 1
        ptr[k] = p
        if p >= end:
            return
        kind = kinds_l[p]
        mb = mbs_l[p]
        if kind == KIND_B:
            if k == last or 0 <= grad_arr[k][mb] <= now:
                start_task(k, p, now)
            return
        if kind == KIND_F:
            # Opportunistic runs never stash beyond the plan's in-flight
            # bound: memory is priced against it.
            capped = opportunistic and stash[k] >= int(stash_cap[k])
            if not capped and 0 <= act_arr[k][mb] <= now:
                start_task(k, p, now)
                return
            if not opportunistic:
                return
            # Activation late (or stash full): let the next recompute/backward
            # pair jump ahead once its recompute is due.
            c = bwd_exec[k]
            if c < N and k != last:
                jb = bwd_order_mb[k][c]
                rp = rec_pos[k][jb]
                if rp >= 0 and not executed[rp] and fwd_exec[k] > jb:
                    if now >= rec_due_at(k, jb, now):
                        start_task(k, rp, now)
            return
        # Recompute head. Static order runs it immediately; opportunistically
        # it waits for its just-in-time start, filling with forwards.
        if not opportunistic or k == last:
            start_task(k, p, now)
            return
        f = fwd_exec[k]
        f_ready = (f < N and 0 <= act_arr[k][f] <= now
                   and stash[k] < int(stash_cap[k]))
        g = grad_arr[k][mb]
        if 0 <= g <= now:
            # Gradients have queued up (the stage is running late). Pace the
            # backlog with one ready forward per recompute/backward pair so
            # activations keep flowing downstream; the backward is not ready
            # until the recompute runs, so rule 3 is untouched.
            if f_ready and last_done[k] == KIND_B:
                start_task(k, fwd_pos[k][f], now)
            else:
                start_task(k, p, now)
            return
        due_at = rec_due_at(k, mb, now)
        if now >= due_at:
            start_task(k, p, now)
            return
        if f_ready:
            if now + int(fwd_us[k]) <= due_at:
                start_task(k, fwd_pos[k][f], now)
            # An arrived forward that does not fit: hold the slot for the
            # just-in-time recompute (rule 1) and run the forward after.
            return
        # Nothing to fill with; recomputing early still meets rule 1.
        start_task(k, p, now)

    while heap:
        now = heap[0][0]
        touched = set()
        while heap and heap[0][0] == now:
            _, k = heapq.heappop(heap)
            if running_kind[k] >= 0 and busy_until[k] == now:
                complete(k, now)
            touched.add(k)
        for k in sorted(touched):
            decide(k, now)

    for k in range(P):
        if bwd_exec[k] != N:
            raise RuntimeError(
                f"replica simulation deadlocked: stage {k} completed "
                f"{bwd_exec[k]}/{N} backwards"
            )

    makespan = int(out_end[:n_out].max()) if n_out else 0
    return {
        "task_stage": out_stage[:n_out],
        "task_kind": out_kind[:n_out],
        "task_mb": out_mb[:n_out],
        "task_start": out_start[:n_out],
        "task_end": out_end[:n_out],
        "msg_send": msg_send[:n_msg],
        "msg_grant": msg_grant[:n_msg],
        "msg_arrive": msg_arrive[:n_msg],
        "msg_boundary": msg_boundary[:n_msg],
        "msg_dir": msg_dir[:n_msg],
        "msg_mb": msg_mb[:n_msg],
        "last_bwd_end": np.array(last_bwd_end, dtype=np.int64),
        "peak_stash": np.array(peak_stash, dtype=np.int64),
        "peak_sets": np.array(peak_sets, dtype=np.int64),
        "peak_mem": np.array(peak_mem, dtype=np.int64),
        "makespan": makespan,
    }
