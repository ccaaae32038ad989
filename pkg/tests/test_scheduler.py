import itertools

import pytest

from spotpipe.core import ConfigError
from spotpipe.scheduler import (
    BACKWARD,
    FORWARD,
    POLICY_VARUNA,
    RECOMPUTE,
    Task,
    generate_gpipe_schedule,
    generate_varuna_schedule,
    makespan_us,
    replay_uniform,
    schedule_from_csv,
    schedule_from_tasks,
    schedule_to_csv,
    validate_schedule,
)

UNIT = (1.0, 2.0, 1.0)  # T_f, T_b, T_r


def names(schedule, stage):
    return [t.kind + str(t.micro_batch) for t in schedule.stage_tasks[stage - 1]]


class TestVarunaGeneration:
    def test_single_stage_single_microbatch(self):
        s = generate_varuna_schedule(1, 1, *UNIT)
        assert names(s, 1) == ["F1", "B1"]

    def test_single_stage_alternates(self):
        s = generate_varuna_schedule(1, 4, *UNIT)
        assert names(s, 1) == ["F1", "B1", "F2", "B2", "F3", "B3", "F4", "B4"]

    def test_last_stage_never_recomputes(self):
        for p in (2, 4, 6):
            s = generate_varuna_schedule(p, 7, *UNIT)
            assert all(t.kind != RECOMPUTE for t in s.stage_tasks[p - 1])
            for k in range(1, p):
                recs = sum(1 for t in s.stage_tasks[k - 1] if t.kind == RECOMPUTE)
                assert recs == 7

    def test_one_unit_faster_than_reference(self):
        v = generate_varuna_schedule(4, 5, *UNIT)
        g = generate_gpipe_schedule(4, 5, *UNIT)
        assert makespan_us(g) - makespan_us(v) == 1_000_000

    def test_forwards_interspersed_mid_schedule(self):
        # Stage 3 of the (4, 5) schedule runs forwards in the middle, not
        # bunched at the start.
        s = generate_varuna_schedule(4, 5, *UNIT)
        kinds = [t.kind for t in s.stage_tasks[2]]
        first_b = kinds.index(BACKWARD)
        assert FORWARD in kinds[first_b:]

    def test_generated_schedules_validate_clean(self):
        for p in range(1, 9):
            for n in range(1, 17):
                s = generate_varuna_schedule(p, n, *UNIT)
                assert validate_schedule(s) == [], (p, n)

    def test_dominates_reference_schedule(self):
        for p in range(1, 9):
            for n in range(1, 17):
                v = generate_varuna_schedule(p, n, *UNIT)
                g = generate_gpipe_schedule(p, n, *UNIT)
                assert makespan_us(v) <= makespan_us(g), (p, n)

    def test_exhaustive_small_case(self):
        # P=2, N_m=2: enumerate every rule-respecting ordering; the generator's
        # schedule must be among them and achieve the minimum makespan.
        v = generate_varuna_schedule(2, 2, *UNIT)
        assert names(v, 2) == ["F1", "B1", "F2", "B2"]
        assert validate_schedule(v) == []

        best = None
        stage1_tasks = [("F", 1), ("F", 2), ("R", 1), ("R", 2), ("B", 1), ("B", 2)]
        stage2_tasks = [("F", 1), ("F", 2), ("B", 1), ("B", 2)]
        count = 0
        for order1 in itertools.permutations(stage1_tasks):
            if not self._locally_sane(order1):
                continue
            for order2 in itertools.permutations(stage2_tasks):
                if not self._locally_sane(order2):
                    continue
                cand = schedule_from_tasks(POLICY_VARUNA, [order1, order2], *UNIT)
                try:
                    violations = validate_schedule(cand)
                except ConfigError:
                    continue
                if violations:
                    continue
                count += 1
                span = makespan_us(cand)
                best = span if best is None else min(best, span)
        assert count > 0
        assert makespan_us(v) == best == 9_000_000

    @staticmethod
    def _locally_sane(order):
        # F(j) before R(j) before B(j) within the stage list.
        pos = {(kind, mb): i for i, (kind, mb) in enumerate(order)}
        for mb in (1, 2):
            f = pos.get(("F", mb))
            b = pos.get(("B", mb))
            r = pos.get(("R", mb))
            if f is None or b is None or f > b:
                return False
            if r is not None and not (f < r < b):
                return False
        return True

    def test_in_flight_bound(self):
        s = generate_varuna_schedule(4, 5, *UNIT)
        # Stage 1 runs all five forwards before its first backward.
        assert s.in_flight_bound(1) == 5
        assert s.in_flight_bound(4) == 1  # F/B alternation

    def test_rejects_bad_input(self):
        with pytest.raises(ConfigError):
            generate_varuna_schedule(0, 5, *UNIT)
        with pytest.raises(ConfigError):
            generate_varuna_schedule(2, 2, 0.0, 1.0, 1.0)


class TestGpipeGeneration:
    def test_single_microbatch(self):
        s = generate_gpipe_schedule(1, 1, *UNIT)
        assert names(s, 1) == ["F1", "B1"]

    def test_forwards_bunched_first(self):
        s = generate_gpipe_schedule(4, 5, *UNIT)
        for k in range(1, 5):
            kinds = [t.kind for t in s.stage_tasks[k - 1]]
            assert kinds[:5] == [FORWARD] * 5

    def test_last_stage_skips_recompute_for_final_microbatch_only(self):
        s = generate_gpipe_schedule(4, 5, *UNIT)
        last = s.stage_tasks[3]
        recs = sorted(t.micro_batch for t in last if t.kind == RECOMPUTE)
        assert recs == [1, 2, 3, 4]
        # Backwards drain in reverse micro-batch order.
        bwds = [t.micro_batch for t in last if t.kind == BACKWARD]
        assert bwds == [5, 4, 3, 2, 1]


class TestValidator:
    def test_rule2_violation_detected(self):
        # A forward squeezed between R1 and B1 breaks rule 2.
        s = schedule_from_tasks(
            POLICY_VARUNA,
            [
                [("F", 1), ("F", 2), ("R", 1), ("F", 3), ("B", 1),
                 ("R", 2), ("B", 2), ("R", 3), ("B", 3)],
                [("F", 1), ("B", 1), ("F", 2), ("B", 2), ("F", 3), ("B", 3)],
            ],
            *UNIT,
        )
        violations = validate_schedule(s)
        assert any(v.rule == "rule2" and v.stage == 1 and v.micro_batch == 1
                   for v in violations)

    def test_rule3_violation_detected(self):
        # Last stage runs F2 although B1 became ready when F1 finished.
        s = schedule_from_tasks(
            POLICY_VARUNA,
            [
                [("F", 1), ("F", 2), ("R", 1), ("B", 1), ("R", 2), ("B", 2)],
                [("F", 1), ("F", 2), ("B", 1), ("B", 2)],
            ],
            *UNIT,
        )
        violations = validate_schedule(s)
        assert any(v.rule == "rule3" and v.stage == 2 for v in violations)

    def test_rule1_late_recompute_detected(self):
        # Stage 1 recomputes after idling so long that the gradient already
        # arrived: start > arrival - T_r.
        s = schedule_from_tasks(
            POLICY_VARUNA,
            [
                [("F", 1), ("F", 2), ("F", 3), ("R", 1), ("B", 1),
                 ("R", 2), ("B", 2), ("R", 3), ("B", 3)],
                [("F", 1), ("B", 1), ("F", 2), ("B", 2), ("F", 3), ("B", 3)],
            ],
            *UNIT,
        )
        # Replay puts R1 at t=3 while the gradient lands at t=4 (B1 down at
        # [2,4]); 3 > 4 - 1 fails rule 1... actually equality holds; widen by
        # forcing the recompute later with an extra forward first.
        violations = validate_schedule(s)
        assert all(v.rule != "rule1" for v in violations)  # this one is fine

        late = schedule_from_tasks(
            POLICY_VARUNA,
            [
                [("F", 1), ("F", 2), ("F", 3), ("F", 4), ("R", 1), ("B", 1),
                 ("R", 2), ("B", 2), ("R", 3), ("B", 3), ("R", 4), ("B", 4)],
                [("F", 1), ("B", 1), ("F", 2), ("B", 2), ("F", 3), ("B", 3),
                 ("F", 4), ("B", 4)],
            ],
            *UNIT,
        )
        violations = validate_schedule(late)
        assert any(v.rule == "rule1" for v in violations)

    def test_structure_violation(self):
        s = schedule_from_tasks(
            POLICY_VARUNA,
            [[("F", 1), ("B", 1), ("B", 2)]],
            *UNIT,
        )
        violations = validate_schedule(s)
        assert any(v.rule == "structure" for v in violations)


class TestSerialization:
    def test_roundtrip(self):
        s = generate_varuna_schedule(3, 4, *UNIT)
        text = schedule_to_csv(s)
        back = schedule_from_csv(text, POLICY_VARUNA, *UNIT)
        assert back.stage_tasks == s.stage_tasks
        assert back.pipeline_depth == 3 and back.num_micro_batches == 4

    def test_golden_format(self):
        s = generate_varuna_schedule(2, 2, *UNIT)
        assert schedule_to_csv(s) == (
            "stage,seq,kind,microbatch\n"
            "1,1,F,1\n"
            "1,2,F,2\n"
            "1,3,R,1\n"
            "1,4,B,1\n"
            "1,5,R,2\n"
            "1,6,B,2\n"
            "2,1,F,1\n"
            "2,2,B,1\n"
            "2,3,F,2\n"
            "2,4,B,2\n"
        )

    def test_bad_csv(self):
        with pytest.raises(ConfigError):
            schedule_from_csv("1,1,Q,1", POLICY_VARUNA, *UNIT)


def test_replay_dependency_soundness():
    for p, n in ((4, 5), (3, 7), (6, 2)):
        s = generate_varuna_schedule(p, n, *UNIT)
        times = replay_uniform(s)
        for j in range(1, n + 1):
            for k in range(2, p + 1):
                assert times[Task(FORWARD, j, k)][0] >= times[Task(FORWARD, j, k - 1)][1]
            for k in range(1, p):
                assert times[Task(BACKWARD, j, k)][0] >= times[Task(BACKWARD, j, k + 1)][1]
                assert times[Task(BACKWARD, j, k)][0] >= times[Task(RECOMPUTE, j, k)][1]


def test_idle_time_interspersed():
    # The rule-based schedule spreads its whitespace: at every interior stage
    # its largest contiguous between-task idle block is no bigger than the
    # reference schedule's, and strictly smaller at stage 2, where the
    # reference schedule concentrates its mid-schedule bubble (P >= 4,
    # N_m >= 2P so a steady state exists).
    def max_inner_gap(times, k):
        stage = sorted(times[t] for t in times if t.stage == k)
        gaps = [c - b for (_, b), (c, _) in zip(stage, stage[1:])]
        return max(gaps) if gaps else 0

    for p in (4, 5, 6):
        for n in (2 * p, 2 * p + 3, 16):
            tv = replay_uniform(generate_varuna_schedule(p, n, *UNIT))
            tg = replay_uniform(generate_gpipe_schedule(p, n, *UNIT))
            for k in range(2, p):
                assert max_inner_gap(tv, k) <= max_inner_gap(tg, k), (p, n, k)
            assert max_inner_gap(tv, 2) < max_inner_gap(tg, 2), (p, n)
