# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled discrete-event kernel for one pipeline replica.

Semantics mirror ``py_kernel.run_replica`` exactly: integer microsecond
arithmetic, identical event ordering (time, then stage), so results are
bit-identical with the pure-Python kernel. See py_kernel.py for the model and
the opportunistic decision policy.
"""

from libc.stdlib cimport malloc, free

import numpy as np
cimport numpy as cnp

cnp.import_array()

cdef int KIND_B = 0
cdef int KIND_R = 1
cdef int KIND_F = 2

ctypedef cnp.int64_t i64


cdef struct Heap:
    i64* items  # packed (time << 12) | stage
    Py_ssize_t size


cdef inline void heap_push(Heap* h, i64 key) noexcept nogil:
    cdef Py_ssize_t i, parent
    cdef i64 tmp
    h.items[h.size] = key
    i = h.size
    h.size += 1
    while i > 0:
        parent = (i - 1) >> 1
        if h.items[parent] <= h.items[i]:
            break
        tmp = h.items[parent]
        h.items[parent] = h.items[i]
        h.items[i] = tmp
        i = parent


cdef inline i64 heap_pop(Heap* h) noexcept nogil:
    cdef i64 top = h.items[0]
    cdef i64 tmp
    cdef Py_ssize_t i = 0, child
    h.size -= 1
    h.items[0] = h.items[h.size]
    while True:
        child = 2 * i + 1
        if child >= h.size:
            break
        if child + 1 < h.size and h.items[child + 1] < h.items[child]:
            child += 1
        if h.items[i] <= h.items[child]:
            break
        tmp = h.items[i]
        h.items[i] = h.items[child]
        h.items[child] = tmp
        i = child
    return top


cdef struct Sim:
    int P
    int N
    int last
    bint serialize
    Py_ssize_t n_out
    Py_ssize_t n_msg
    i64* kinds
    i64* mbs
    i64* fwd_us
    i64* bwd_us
    i64* rec_us
    i64* act_tx
    i64* grad_tx
    i64* exp_grad_tx
    i64* in_act_bytes
    i64* work_bytes
    i64* stash_cap
    i64* out_stage
    i64* out_kind
    i64* out_mb
    i64* out_start
    i64* out_end
    i64* msg_send
    i64* msg_grant
    i64* msg_arrive
    i64* msg_boundary
    i64* msg_dir
    i64* msg_mb
    Py_ssize_t* ptr
    Py_ssize_t* stage_end
    char* executed
    int* running_kind
    int* running_mb
    i64* busy_until
    int* locked_mb
    int* last_done
    int* fwd_exec
    int* bwd_exec
    Py_ssize_t* fwd_pos
    Py_ssize_t* bwd_order_pos
    int* bwd_order_mb
    Py_ssize_t* rec_pos
    i64* act_arr
    i64* grad_arr
    i64* deadline
    i64* act_link_free
    i64* grad_link_free
    i64* stash
    i64* sets
    i64* peak_stash
    i64* peak_sets
    i64* peak_mem
    i64* last_bwd_end
    Heap heap


cdef inline void start_task(Sim* s, int k, Py_ssize_t pos, i64 now) noexcept nogil:
    cdef int kind = <int> s.kinds[pos]
    cdef int mb = <int> s.mbs[pos]
    cdef i64 dur, cur, dl
    if kind == KIND_F:
        dur = s.fwd_us[k]
    elif kind == KIND_B:
        dur = s.bwd_us[k]
    else:
        dur = s.rec_us[k]
    s.executed[pos] = 1
    s.running_kind[k] = kind
    s.running_mb[k] = mb
    s.busy_until[k] = now + dur
    s.out_stage[s.n_out] = k
    s.out_kind[s.n_out] = kind
    s.out_mb[s.n_out] = mb
    s.out_start[s.n_out] = now
    s.out_end[s.n_out] = now + dur
    s.n_out += 1
    if kind == KIND_F:
        s.fwd_exec[k] += 1
        s.stash[k] += 1
        s.sets[k] += 1
        if s.stash[k] > s.peak_stash[k]:
            s.peak_stash[k] = s.stash[k]
        if s.sets[k] > s.peak_sets[k]:
            s.peak_sets[k] = s.sets[k]
        cur = s.stash[k] * s.in_act_bytes[k] + s.sets[k] * s.work_bytes[k]
        if cur > s.peak_mem[k]:
            s.peak_mem[k] = cur
    elif kind == KIND_R:
        s.sets[k] += 1
        if s.sets[k] > s.peak_sets[k]:
            s.peak_sets[k] = s.sets[k]
        cur = s.stash[k] * s.in_act_bytes[k] + s.sets[k] * s.work_bytes[k]
        if cur > s.peak_mem[k]:
            s.peak_mem[k] = cur
    else:
        s.locked_mb[k] = -1
        if k > 0:
            dl = now + dur + s.exp_grad_tx[k - 1] - s.rec_us[k - 1]
            s.deadline[(k - 1) * s.N + mb] = dl
            heap_push(&s.heap, ((dl if dl > now else now) << 12) | (k - 1))
    heap_push(&s.heap, ((now + dur) << 12) | k)


cdef inline void send_msg(Sim* s, int boundary, int direction, int mb, i64 now) noexcept nogil:
    cdef i64 dur, grant, arrive
    if direction == 0:
        dur = s.act_tx[boundary * s.N + mb]
    else:
        dur = s.grad_tx[boundary * s.N + mb]
    if s.serialize:
        if direction == 0:
            grant = now if s.act_link_free[boundary] <= now else s.act_link_free[boundary]
            arrive = grant + dur
            s.act_link_free[boundary] = arrive
        else:
            grant = now if s.grad_link_free[boundary] <= now else s.grad_link_free[boundary]
            arrive = grant + dur
            s.grad_link_free[boundary] = arrive
    else:
        grant = now
        arrive = now + dur
    s.msg_send[s.n_msg] = now
    s.msg_grant[s.n_msg] = grant
    s.msg_arrive[s.n_msg] = arrive
    s.msg_boundary[s.n_msg] = boundary
    s.msg_dir[s.n_msg] = direction
    s.msg_mb[s.n_msg] = mb
    s.n_msg += 1
    if direction == 0:
        s.act_arr[(boundary + 1) * s.N + mb] = arrive
        heap_push(&s.heap, (arrive << 12) | (boundary + 1))
    else:
        s.grad_arr[boundary * s.N + mb] = arrive
        heap_push(&s.heap, (arrive << 12) | boundary)
        # Wake the receiver at the just-in-time recompute start.
        grant = arrive - s.rec_us[boundary]
        heap_push(&s.heap, ((grant if grant > now else now) << 12) | boundary)


cdef i64 _FAR = <i64> 1 << 60


cdef inline i64 rec_due_at(Sim* s, int k, int mb, i64 now) noexcept nogil:
    # Just-in-time start for R(mb) at stage k: gradient arrival minus T_r when
    # the arrival is known (message in flight), else the estimate set when the
    # downstream backward started, else far future.
    cdef i64 g = s.grad_arr[k * s.N + mb]
    cdef i64 dl
    if g >= 0:
        if g <= now:
            return now  # already late
        return g - s.rec_us[k]
    dl = s.deadline[k * s.N + mb]
    return dl if dl >= 0 else _FAR


cdef inline void complete(Sim* s, int k, i64 now) noexcept nogil:
    cdef int kind = s.running_kind[k]
    cdef int mb = s.running_mb[k]
    s.running_kind[k] = -1
    s.running_mb[k] = -1
    s.last_done[k] = kind
    if kind == KIND_F:
        if k < s.last:
            s.sets[k] -= 1
            send_msg(s, k, 0, mb, now)
    elif kind == KIND_R:
        s.locked_mb[k] = mb
    else:
        s.sets[k] -= 1
        s.stash[k] -= 1
        s.bwd_exec[k] += 1
        s.last_bwd_end[k] = now
        if k > 0:
            send_msg(s, k - 1, 1, mb, now)


cdef inline void decide(Sim* s, int k, i64 now, bint opportunistic) noexcept nogil:
    cdef int j, c, jb, mb, kind, f
    cdef Py_ssize_t p, end, rp, rp0
    cdef i64 g, a, dl
    cdef bint r_pending, f_done, recomputed, capped, f_ready
    if s.running_kind[k] >= 0:
        return
    j = s.locked_mb[k]
    if j >= 0:
        # The last stage's loss is local, so its backward needs no gradient.
        if k == s.last:
            start_task(s, k, s.bwd_order_pos[k * s.N + s.bwd_exec[k]], now)
            return
        g = s.grad_arr[k * s.N + j]
        if 0 <= g <= now:
            start_task(s, k, s.bwd_order_pos[k * s.N + s.bwd_exec[k]], now)
        return
    p = s.ptr[k]
    end = s.stage_end[k]
    while p < end and s.executed[p]:
        p += 1
    s.ptr[k] = p
    if p >= end:
        return
    kind = <int> s.kinds[p]
    mb = <int> s.mbs[p]
    if kind == KIND_B:
        if k == s.last:
            start_task(s, k, p, now)
        else:
            g = s.grad_arr[k * s.N + mb]
            if 0 <= g <= now:
                start_task(s, k, p, now)
        return
    if kind == KIND_F:
        # Opportunistic runs never stash beyond the plan's in-flight bound:
        # memory is priced against it.
        capped = 1 if (opportunistic and s.stash[k] >= s.stash_cap[k]) else 0
        a = s.act_arr[k * s.N + mb]
        if (not capped) and 0 <= a <= now:
            start_task(s, k, p, now)
            return
        if not opportunistic:
            return
        # Activation late (or stash full): let the next recompute/backward
        # pair jump ahead once its recompute is due.
        c = s.bwd_exec[k]
        if c < s.N and k != s.last:
            jb = s.bwd_order_mb[k * s.N + c]
            rp0 = s.rec_pos[k * s.N + jb]
            if rp0 >= 0 and (not s.executed[rp0]) and s.fwd_exec[k] > jb:
                if now >= rec_due_at(s, k, jb, now):
                    start_task(s, k, rp0, now)
        return
    # Recompute head. Static order runs it immediately; opportunistically it
    # waits for its just-in-time start, filling with forwards.
    if (not opportunistic) or k == s.last:
        start_task(s, k, p, now)
        return
    f = s.fwd_exec[k]
    f_ready = 0
    if f < s.N and s.stash[k] < s.stash_cap[k]:
        a = s.act_arr[k * s.N + f]
        if 0 <= a <= now:
            f_ready = 1
    g = s.grad_arr[k * s.N + mb]
    if 0 <= g <= now:
        # Gradients have queued up (the stage is running late). Pace the
        # backlog with one ready forward per recompute/backward pair so
        # activations keep flowing downstream; the backward is not ready
        # until the recompute runs, so rule 3 is untouched.
        if f_ready and s.last_done[k] == KIND_B:
            start_task(s, k, s.fwd_pos[k * s.N + f], now)
        else:
            start_task(s, k, p, now)
        return
    dl = rec_due_at(s, k, mb, now)
    if now >= dl:
        start_task(s, k, p, now)
        return
    if f_ready:
        if now + s.fwd_us[k] <= dl:
            start_task(s, k, s.fwd_pos[k * s.N + f], now)
        # An arrived forward that does not fit: hold the slot for the
        # just-in-time recompute (rule 1) and run the forward after.
        return
    # Nothing to fill with; recomputing early still meets rule 1.
    start_task(s, k, p, now)


def run_replica(
    n_stages,
    n_micro,
    cnp.ndarray[i64, ndim=1] kinds,
    cnp.ndarray[i64, ndim=1] mbs,
    cnp.ndarray[i64, ndim=1] offsets,
    cnp.ndarray[i64, ndim=1] fwd_us,
    cnp.ndarray[i64, ndim=1] bwd_us,
    cnp.ndarray[i64, ndim=1] rec_us,
    cnp.ndarray[i64, ndim=1] act_tx_us,
    cnp.ndarray[i64, ndim=1] grad_tx_us,
    cnp.ndarray[i64, ndim=1] exp_grad_tx_us,
    cnp.ndarray[i64, ndim=1] in_act_bytes,
    cnp.ndarray[i64, ndim=1] work_bytes,
    cnp.ndarray[i64, ndim=1] stash_cap,
    opportunistic,
    serialize_links,
):
    cdef int P = n_stages
    cdef int N = n_micro
    cdef bint opp = 1 if opportunistic else 0
    cdef Py_ssize_t n_tasks = offsets[P]
    cdef Py_ssize_t n_msgs = 2 * (P - 1) * N if P > 1 else 0
    cdef Py_ssize_t nlinks = P - 1 if P > 1 else 1

    out_stage_a = np.empty(n_tasks, dtype=np.int64)
    out_kind_a = np.empty(n_tasks, dtype=np.int64)
    out_mb_a = np.empty(n_tasks, dtype=np.int64)
    out_start_a = np.empty(n_tasks, dtype=np.int64)
    out_end_a = np.empty(n_tasks, dtype=np.int64)
    msg_send_a = np.empty(max(n_msgs, 1), dtype=np.int64)
    msg_grant_a = np.empty(max(n_msgs, 1), dtype=np.int64)
    msg_arrive_a = np.empty(max(n_msgs, 1), dtype=np.int64)
    msg_boundary_a = np.empty(max(n_msgs, 1), dtype=np.int64)
    msg_dir_a = np.empty(max(n_msgs, 1), dtype=np.int64)
    msg_mb_a = np.empty(max(n_msgs, 1), dtype=np.int64)
    last_bwd_a = np.zeros(P, dtype=np.int64)
    peak_stash_a = np.zeros(P, dtype=np.int64)
    peak_sets_a = np.zeros(P, dtype=np.int64)
    peak_mem_a = np.zeros(P, dtype=np.int64)

    cdef i64[:] v_out_stage = out_stage_a
    cdef i64[:] v_out_kind = out_kind_a
    cdef i64[:] v_out_mb = out_mb_a
    cdef i64[:] v_out_start = out_start_a
    cdef i64[:] v_out_end = out_end_a
    cdef i64[:] v_msg_send = msg_send_a
    cdef i64[:] v_msg_grant = msg_grant_a
    cdef i64[:] v_msg_arrive = msg_arrive_a
    cdef i64[:] v_msg_boundary = msg_boundary_a
    cdef i64[:] v_msg_dir = msg_dir_a
    cdef i64[:] v_msg_mb = msg_mb_a
    cdef i64[:] v_last_bwd = last_bwd_a
    cdef i64[:] v_peak_stash = peak_stash_a
    cdef i64[:] v_peak_sets = peak_sets_a
    cdef i64[:] v_peak_mem = peak_mem_a

    cdef Sim s
    s.P = P
    s.N = N
    s.last = P - 1
    s.serialize = 1 if serialize_links else 0
    s.n_out = 0
    s.n_msg = 0
    s.kinds = <i64*> kinds.data
    s.mbs = <i64*> mbs.data
    s.fwd_us = <i64*> fwd_us.data
    s.bwd_us = <i64*> bwd_us.data
    s.rec_us = <i64*> rec_us.data
    s.act_tx = <i64*> act_tx_us.data
    s.grad_tx = <i64*> grad_tx_us.data
    s.exp_grad_tx = <i64*> exp_grad_tx_us.data
    s.in_act_bytes = <i64*> in_act_bytes.data
    s.work_bytes = <i64*> work_bytes.data
    s.stash_cap = <i64*> stash_cap.data
    s.out_stage = &v_out_stage[0] if n_tasks else NULL
    s.out_kind = &v_out_kind[0] if n_tasks else NULL
    s.out_mb = &v_out_mb[0] if n_tasks else NULL
    s.out_start = &v_out_start[0] if n_tasks else NULL
    s.out_end = &v_out_end[0] if n_tasks else NULL
    s.msg_send = &v_msg_send[0]
    s.msg_grant = &v_msg_grant[0]
    s.msg_arrive = &v_msg_arrive[0]
    s.msg_boundary = &v_msg_boundary[0]
    s.msg_dir = &v_msg_dir[0]
    s.msg_mb = &v_msg_mb[0]
    s.last_bwd_end = &v_last_bwd[0]
    s.peak_stash = &v_peak_stash[0]
    s.peak_sets = &v_peak_sets[0]
    s.peak_mem = &v_peak_mem[0]

    s.ptr = <Py_ssize_t*> malloc(P * sizeof(Py_ssize_t))
    s.stage_end = <Py_ssize_t*> malloc(P * sizeof(Py_ssize_t))
    s.executed = <char*> malloc(max(n_tasks, 1) * sizeof(char))
    s.running_kind = <int*> malloc(P * sizeof(int))
    s.running_mb = <int*> malloc(P * sizeof(int))
    s.busy_until = <i64*> malloc(P * sizeof(i64))
    s.locked_mb = <int*> malloc(P * sizeof(int))
    s.last_done = <int*> malloc(P * sizeof(int))
    s.fwd_exec = <int*> malloc(P * sizeof(int))
    s.bwd_exec = <int*> malloc(P * sizeof(int))
    s.fwd_pos = <Py_ssize_t*> malloc((<Py_ssize_t> P) * N * sizeof(Py_ssize_t))
    s.bwd_order_pos = <Py_ssize_t*> malloc((<Py_ssize_t> P) * N * sizeof(Py_ssize_t))
    s.bwd_order_mb = <int*> malloc((<Py_ssize_t> P) * N * sizeof(int))
    s.rec_pos = <Py_ssize_t*> malloc((<Py_ssize_t> P) * N * sizeof(Py_ssize_t))
    s.act_arr = <i64*> malloc((<Py_ssize_t> P) * N * sizeof(i64))
    s.grad_arr = <i64*> malloc((<Py_ssize_t> P) * N * sizeof(i64))
    s.deadline = <i64*> malloc((<Py_ssize_t> P) * N * sizeof(i64))
    s.act_link_free = <i64*> malloc(nlinks * sizeof(i64))
    s.grad_link_free = <i64*> malloc(nlinks * sizeof(i64))
    s.stash = <i64*> malloc(P * sizeof(i64))
    s.sets = <i64*> malloc(P * sizeof(i64))
    # Pushes: one per task start, one deadline per backward start, one arrival
    # plus one just-in-time wake per message, one initial wake per stage.
    s.heap.items = <i64*> malloc((2 * n_tasks + 2 * n_msgs + P + 8) * sizeof(i64))
    s.heap.size = 0

    if (s.ptr == NULL or s.stage_end == NULL or s.executed == NULL or
            s.running_kind == NULL or s.running_mb == NULL or
            s.busy_until == NULL or s.locked_mb == NULL or s.last_done == NULL or
            s.fwd_exec == NULL or
            s.bwd_exec == NULL or s.fwd_pos == NULL or s.bwd_order_pos == NULL or
            s.bwd_order_mb == NULL or s.rec_pos == NULL or s.act_arr == NULL or
            s.grad_arr == NULL or s.deadline == NULL or s.act_link_free == NULL or
            s.grad_link_free == NULL or s.stash == NULL or s.sets == NULL or
            s.heap.items == NULL):
        raise MemoryError("kernel allocation failed")

    cdef Py_ssize_t i, pos
    cdef int k, nf, nb, kind, mb, failed = -1
    cdef i64 now, key
    cdef char* touched = <char*> malloc(P * sizeof(char))
    if touched == NULL:
        raise MemoryError("kernel allocation failed")

    for i in range(n_tasks):
        s.executed[i] = 0
    for i in range(P * N):
        s.act_arr[i] = -1
        s.grad_arr[i] = -1
        s.deadline[i] = -1
        s.fwd_pos[i] = -1
        s.bwd_order_pos[i] = -1
        s.bwd_order_mb[i] = -1
        s.rec_pos[i] = -1
    for k in range(P):
        s.ptr[k] = offsets[k]
        s.stage_end[k] = offsets[k + 1]
        s.running_kind[k] = -1
        s.running_mb[k] = -1
        s.busy_until[k] = 0
        s.locked_mb[k] = -1
        s.last_done[k] = -1
        s.fwd_exec[k] = 0
        s.bwd_exec[k] = 0
        s.stash[k] = 0
        s.sets[k] = 0
        touched[k] = 0
        nf = 0
        nb = 0
        for pos in range(offsets[k], offsets[k + 1]):
            kind = <int> kinds[pos]
            mb = <int> mbs[pos]
            if kind == KIND_F:
                s.fwd_pos[k * N + nf] = pos
                nf += 1
            elif kind == KIND_B:
                s.bwd_order_pos[k * N + nb] = pos
                s.bwd_order_mb[k * N + nb] = mb
                nb += 1
            else:
                s.rec_pos[k * N + mb] = pos
    for mb in range(N):
        s.act_arr[mb] = 0  # stage 0
    for i in range(nlinks):
        s.act_link_free[i] = 0
        s.grad_link_free[i] = 0

    with nogil:
        for k in range(P):
            heap_push(&s.heap, <i64> k)  # time 0, every stage
        while s.heap.size > 0:
            now = s.heap.items[0] >> 12
            for k in range(P):
                touched[k] = 0
            while s.heap.size > 0 and (s.heap.items[0] >> 12) == now:
                key = heap_pop(&s.heap)
                k = <int> (key & 0xFFF)
                touched[k] = 1
                if s.running_kind[k] >= 0 and s.busy_until[k] == now:
                    complete(&s, k, now)
            for k in range(P):
                if touched[k]:
                    decide(&s, k, now, opp)
        for k in range(P):
            if s.bwd_exec[k] != N:
                failed = k
                break

    cdef Py_ssize_t n_out = s.n_out
    cdef Py_ssize_t n_msg = s.n_msg

    free(s.ptr); free(s.stage_end); free(s.executed); free(s.running_kind)
    free(s.running_mb); free(s.busy_until); free(s.locked_mb); free(s.last_done)
    free(s.fwd_exec)
    free(s.bwd_exec); free(s.fwd_pos); free(s.bwd_order_pos); free(s.bwd_order_mb)
    free(s.rec_pos); free(s.act_arr); free(s.grad_arr); free(s.deadline)
    free(s.act_link_free); free(s.grad_link_free); free(s.stash); free(s.sets)
    free(s.heap.items); free(touched)

    if failed >= 0:
        raise RuntimeError(
            "replica simulation deadlocked: stage %d did not finish" % failed
        )

    makespan = int(out_end_a[:n_out].max()) if n_out else 0
    return {
        "task_stage": out_stage_a[:n_out],
        "task_kind": out_kind_a[:n_out],
        "task_mb": out_mb_a[:n_out],
        "task_start": out_start_a[:n_out],
        "task_end": out_end_a[:n_out],
        "msg_send": msg_send_a[:n_msg],
        "msg_grant": msg_grant_a[:n_msg],
        "msg_arrive": msg_arrive_a[:n_msg],
        "msg_boundary": msg_boundary_a[:n_msg],
        "msg_dir": msg_dir_a[:n_msg],
        "msg_mb": msg_mb_a[:n_msg],
        "last_bwd_end": last_bwd_a,
        "peak_stash": peak_stash_a,
        "peak_sets": peak_sets_a,
        "peak_mem": peak_mem_a,
        "makespan": makespan,
    }
