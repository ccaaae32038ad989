"""Command-line front end. File in, file out; no interactive loop.

Exit codes: 0 success, 1 domain infeasibility (e.g. no feasible
configuration), 2 malformed input. All outputs are functions of inputs plus
explicit seeds; nothing reads the clock or the environment.
"""

from __future__ import annotations

import argparse
import json
import sys
from typing import List, Optional

from . import __version__, engine
from .calibration import load_profile, save_profile, synthesize_profile
from .configio import load_job_file
from .core import (
    ConfigError,
    InfeasibleError,
    ParallelConfig,
    uniform_cluster,
)
from .gantt import gantt_csv, render_gantt
from .morphing import ReplayParams, load_trace, replay, timeline_svg
from .partitioner import assign_stages, identify_cutpoints, load_op_profile
from .planner import micro_batches_for, plan, select_microbatch
from .scheduler import (
    POLICY_GPIPE,
    POLICY_VARUNA,
    generate_gpipe_schedule,
    generate_varuna_schedule,
    schedule_to_csv,
)
from .simulator import build_placement, simulate_minibatch


def main(argv: Optional[List[str]] = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_help()
        return 2
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except InfeasibleError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="spotpipe",
        description="Plan and simulate pipeline+data parallel training jobs "
        "on preemptible clusters.",
    )
    parser.add_argument("--version", action="version",
                        version=f"spotpipe {__version__} (engine: {engine.ENGINE_NAME})")
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("plan", help="sweep configurations and pick the fastest")
    p.add_argument("--spec", required=True, help="job config file (model/hardware/job)")
    p.add_argument("--calibration", required=True, help="calibration profile file")
    p.add_argument("--gpus", type=int, required=True)
    p.add_argument("--gpus-per-vm", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="write the chosen configuration to this file")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=_cmd_plan)

    p = sub.add_parser("simulate", help="simulate one mini-batch of a configuration")
    p.add_argument("--spec", required=True)
    p.add_argument("--calibration", required=True)
    p.add_argument("--config", required=True, help="PxD, e.g. 6x4")
    p.add_argument("--micro-batch", type=int, default=None)
    p.add_argument("--schedule", choices=[POLICY_VARUNA, POLICY_GPIPE],
                   default=POLICY_VARUNA)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--gpus-per-vm", type=int, default=1)
    p.add_argument("--no-opportunistic", action="store_true")
    p.add_argument("--gantt", help="write a Gantt SVG here")
    p.add_argument("--gantt-csv", help="write Gantt CSV here")
    p.add_argument("--events", help="write the event log here")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("compare", help="varuna vs gpipe across network slowdowns")
    p.add_argument("--spec", required=True)
    p.add_argument("--calibration", required=True)
    p.add_argument("--config", required=True, help="PxD, e.g. 18x3")
    p.add_argument("--micro-batch", type=int, default=None)
    p.add_argument("--bandwidth-scale", default="1.0",
                   help="comma list; 0.5 means the inter-node network is 2x slower")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--gpus-per-vm", type=int, default=1)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=_cmd_compare)

    p = sub.add_parser("replay", help="replay a preemption trace with morphing")
    p.add_argument("--spec", required=True)
    p.add_argument("--calibration", required=True)
    p.add_argument("--trace", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--horizon", type=float, default=None, help="seconds")
    p.add_argument("--csv", help="write the timeline CSV here")
    p.add_argument("--svg", help="write the throughput plot here")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=_cmd_replay)

    p = sub.add_parser("partition", help="identify cut-points / balance stages")
    p.add_argument("--ops", required=True, help="operator profile file")
    p.add_argument("-K", "--cutpoints", type=int, required=True)
    p.add_argument("-P", "--stages", type=int, default=None)
    p.add_argument("--tolerance", type=float, default=0.2)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=_cmd_partition)

    p = sub.add_parser("calibrate-synth", help="synthesize a calibration profile")
    p.add_argument("--spec", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--m-grid", default="1,2,4,8")
    p.add_argument("--d-grid", default="")
    p.add_argument("--max-d", type=int, default=32)
    p.add_argument("--contention", type=float, default=1.0)
    p.add_argument("--allreduce-bandwidth", type=float, default=None,
                   help="bytes/s for the dedicated ring-allreduce phase "
                        "(default: the inter-node bandwidth)")
    p.set_defaults(func=_cmd_calibrate)

    p = sub.add_parser("gantt", help="render a Gantt chart from a dumped result")
    p.add_argument("--from-csv", required=True, help="gantt CSV from `simulate`")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_gantt)

    p = sub.add_parser("schedule", help="emit a schedule as CSV")
    p.add_argument("-P", "--stages", type=int, required=True)
    p.add_argument("-N", "--micro-batches", type=int, required=True)
    p.add_argument("--policy", choices=[POLICY_VARUNA, POLICY_GPIPE],
                   default=POLICY_VARUNA)
    p.set_defaults(func=_cmd_schedule)
    return parser


def _parse_pxd(text: str) -> tuple:
    try:
        p, d = text.lower().split("x")
        return int(p), int(d)
    except ValueError:
        raise ConfigError(f"--config: expected PxD (e.g. 6x4), got {text!r}")


def _parse_config_arg(text: str):
    """Either a ``PxD`` string or a chosen-config file written by ``plan``."""
    import os

    if os.path.exists(text):
        try:
            with open(text) as f:
                doc = json.load(f)
            return int(doc["P"]), int(doc["D"]), doc.get("m")
        except (ValueError, KeyError) as e:
            raise ConfigError(f"--config: {text}: malformed chosen-config file ({e})")
    p, d = _parse_pxd(text)
    return p, d, None


def _emit(args, payload: dict, human: str) -> None:
    if getattr(args, "json", False):
        print(json.dumps(payload, sort_keys=True))
    else:
        print(human)


def _cmd_plan(args) -> int:
    jf = load_job_file(args.spec)
    profile = load_profile(args.calibration)
    cluster = jf.cluster or uniform_cluster(args.gpus, args.gpus_per_vm)
    result = plan(args.gpus, jf.model, jf.job, profile, jf.hardware, cluster,
                  seed=args.seed)
    rows = []
    for cand in result.candidates:
        c = cand.config
        ex_s = jf.job.minibatch_examples / cand.minibatch_seconds
        rows.append({
            "P": c.pipeline_depth, "D": c.data_parallel, "m": c.micro_batch_size,
            "N_m": c.num_micro_batches, "minibatch_s": cand.minibatch_seconds,
            "ex_per_s": ex_s, "ex_per_s_per_gpu": ex_s / c.gpus_used,
        })
    chosen = result.chosen
    payload = {
        "chosen": {"P": chosen.pipeline_depth, "D": chosen.data_parallel,
                   "m": chosen.micro_batch_size, "N_m": chosen.num_micro_batches},
        "minibatch_s": result.minibatch_seconds,
        "ex_per_s": result.throughput(jf.job),
        "ex_per_s_per_gpu": result.throughput_per_gpu(jf.job),
        "unused_gpus": result.unused_gpus,
        "candidates": rows,
    }
    lines = [f"{'P':>4} {'D':>4} {'N_m':>6} {'minibatch_s':>12} "
             f"{'ex/s':>10} {'ex/s/GPU':>10}"]
    for r in rows:
        lines.append(f"{r['P']:>4} {r['D']:>4} {r['N_m']:>6} "
                     f"{r['minibatch_s']:>12.3f} {r['ex_per_s']:>10.2f} "
                     f"{r['ex_per_s_per_gpu']:>10.3f}")
    lines.append(
        f"chosen: {chosen.pipeline_depth}x{chosen.data_parallel} "
        f"m={chosen.micro_batch_size} N_m={chosen.num_micro_batches} "
        f"({result.unused_gpus} of {args.gpus} GPUs unused)"
    )
    _emit(args, payload, "\n".join(lines))
    if args.out:
        with open(args.out, "w") as f:
            json.dump(payload["chosen"], f, sort_keys=True)
            f.write("\n")
    return 0


def _make_config(jf, profile, args):
    p, d, m_file = _parse_config_arg(args.config)
    m = args.micro_batch or m_file or select_microbatch(profile)
    n_m = micro_batches_for(jf.job, m, d)
    assignment = assign_stages(jf.model, p, m, profile)
    return ParallelConfig(
        pipeline_depth=p, data_parallel=d, micro_batch_size=m,
        num_micro_batches=n_m, stage_map=assignment.stage_map,
    )


def _cmd_simulate(args) -> int:
    jf = load_job_file(args.spec)
    profile = load_profile(args.calibration)
    config = _make_config(jf, profile, args)
    gen = generate_varuna_schedule if args.schedule == POLICY_VARUNA else generate_gpipe_schedule
    schedule = gen(config.pipeline_depth, config.num_micro_batches, 1.0, 2.0, 1.0)
    cluster = jf.cluster or uniform_cluster(config.gpus_used, args.gpus_per_vm)
    placement = build_placement(cluster, config.pipeline_depth, config.data_parallel)
    result = simulate_minibatch(
        schedule, config, profile, placement, jf.model,
        seed=args.seed, opportunistic=not args.no_opportunistic,
    )
    if args.gantt:
        render_gantt(result, args.gantt, "svg",
                     title=f"{args.schedule} {config.pipeline_depth}x{config.data_parallel}")
    if args.gantt_csv:
        render_gantt(result, args.gantt_csv, "csv")
    if args.events:
        with open(args.events, "w") as f:
            f.write("\n".join(result.event_log_lines()) + "\n")
    summary = result.to_summary_dict()
    ex_s = jf.job.minibatch_examples / result.minibatch_seconds
    summary["ex_per_s"] = ex_s
    summary["ex_per_s_per_gpu"] = ex_s / config.gpus_used
    human = (
        f"policy={args.schedule} config={config.pipeline_depth}x{config.data_parallel} "
        f"m={config.micro_batch_size} N_m={config.num_micro_batches}\n"
        f"minibatch: {result.minibatch_seconds:.6f}s  "
        f"ex/s: {ex_s:.3f}  ex/s/GPU: {ex_s / config.gpus_used:.4f}\n"
        f"bubble fraction: {result.bubble_fraction:.4f}  "
        f"peak stage memory: {max(result.peak_memory_bytes)} bytes"
    )
    _emit(args, summary, human)
    return 0


def _cmd_compare(args) -> int:
    jf = load_job_file(args.spec)
    base_profile = load_profile(args.calibration)
    try:
        scales = [float(s) for s in args.bandwidth_scale.split(",") if s]
    except ValueError:
        raise ConfigError(f"--bandwidth-scale: malformed list {args.bandwidth_scale!r}")
    if not scales:
        raise ConfigError("--bandwidth-scale: need at least one value")
    config = _make_config(jf, base_profile, args)
    cluster = jf.cluster or uniform_cluster(config.gpus_used, args.gpus_per_vm)
    placement = build_placement(cluster, config.pipeline_depth, config.data_parallel)
    rows = []
    for scale in scales:
        profile = _scale_inter_node(base_profile, 1.0 / scale)
        per_policy = {}
        for policy, gen in ((POLICY_VARUNA, generate_varuna_schedule),
                            (POLICY_GPIPE, generate_gpipe_schedule)):
            schedule = gen(config.pipeline_depth, config.num_micro_batches, 1.0, 2.0, 1.0)
            result = simulate_minibatch(schedule, config, profile, placement,
                                        jf.model, seed=args.seed)
            ex_s = jf.job.minibatch_examples / result.minibatch_seconds
            per_policy[policy] = ex_s / config.gpus_used
        v, g = per_policy[POLICY_VARUNA], per_policy[POLICY_GPIPE]
        rows.append({"bandwidth_scale": scale, "slowdown": 1.0 / scale,
                     "varuna_ex_per_s_per_gpu": v, "gpipe_ex_per_s_per_gpu": g,
                     "gap_fraction": (v - g) / v if v else 0.0})
    lines = [f"{'scale':>6} {'slowdown':>9} {'varuna':>9} {'gpipe':>9} {'gap':>7}"]
    for r in rows:
        lines.append(f"{r['bandwidth_scale']:>6.2f} {r['slowdown']:>9.2f} "
                     f"{r['varuna_ex_per_s_per_gpu']:>9.4f} "
                     f"{r['gpipe_ex_per_s_per_gpu']:>9.4f} {r['gap_fraction']:>7.2%}")
    _emit(args, {"rows": rows}, "\n".join(lines))
    return 0


def _scale_inter_node(profile, factor: float):
    """Scale inter-node transfer times (mean and jitter) wholesale."""
    from .calibration import CalibrationProfile, CutpointTimes

    def scaled(table):
        return {k: int(round(v * factor)) for k, v in table.items()}

    cps = []
    for cp in profile.cutpoints:
        cps.append(CutpointTimes(
            forward_us=dict(cp.forward_us),
            backward_us=dict(cp.backward_us),
            act_intra_us=dict(cp.act_intra_us),
            grad_intra_us=dict(cp.grad_intra_us),
            act_inter_mean_us=scaled(cp.act_inter_mean_us),
            act_inter_jitter_us=scaled(cp.act_inter_jitter_us),
            grad_inter_mean_us=scaled(cp.grad_inter_mean_us),
            grad_inter_jitter_us=scaled(cp.grad_inter_jitter_us),
            allreduce_us=scaled(cp.allreduce_us),
        ))
    return CalibrationProfile(
        m_grid=profile.m_grid, d_grid=profile.d_grid, cutpoints=tuple(cps),
        optimizer_bytes_per_param=profile.optimizer_bytes_per_param,
    )


def _cmd_replay(args) -> int:
    jf = load_job_file(args.spec)
    profile = load_profile(args.calibration)
    trace = load_trace(args.trace)
    params = ReplayParams(seed=args.seed, horizon_s=args.horizon)
    timeline = replay(trace, jf.model, jf.job, profile, jf.hardware, params)
    if args.csv:
        with open(args.csv, "w") as f:
            f.write(timeline.to_csv())
    if args.svg:
        with open(args.svg, "w") as f:
            f.write(timeline_svg(timeline, title=f"replay of {args.trace}"))
    payload = {
        "segments": len(timeline.segments),
        "events": [
            {"time_s": ev.time_s, "kind": ev.kind, "detail": ev.detail,
             "lost_minibatches": ev.lost_minibatches}
            for ev in timeline.events
        ],
        "iterations": timeline.iterations_committed,
        "total_examples": timeline.total_examples,
    }
    human_lines = [
        f"{len(timeline.segments)} segments, "
        f"{timeline.iterations_committed} mini-batches committed, "
        f"{timeline.total_examples} examples"
    ]
    for ev in timeline.events:
        if ev.kind != "checkpoint":
            human_lines.append(f"  t={ev.time_s:>10.1f}s {ev.kind:>12} {ev.detail}")
    _emit(args, payload, "\n".join(human_lines))
    return 0


def _cmd_partition(args) -> int:
    ops = load_op_profile(args.ops)
    report = identify_cutpoints(ops, args.cutpoints, tolerance=args.tolerance)
    payload = {
        "boundaries": list(report.boundaries),
        "max_section_us": report.max_section_us,
        "total_boundary_activation": report.total_boundary_activation,
        "cutpoint_parameters": list(report.model.cutpoint_parameters),
        "cutpoint_activation_bytes": list(report.model.cutpoint_activation_bytes),
        "shared_crossings": [list(x) for x in report.shared_crossings],
    }
    lines = [f"cut-point boundaries (op indices): {list(report.boundaries)}",
             f"max section time: {report.max_section_us}us"]
    if report.shared_crossings:
        lines.append("shared parameter groups crossing boundaries: "
                      + ", ".join(f"{g}@{b}" for g, b in report.shared_crossings))
    if args.stages:
        # Stage balancing on the identified sections' compute times.
        prof = _profile_from_sections(report)
        assignment = assign_stages(report.model, args.stages, 1, prof)
        payload["stage_boundaries"] = list(assignment.boundaries)
        payload["stage_parameters"] = list(assignment.stage_parameters)
        lines.append(f"stage boundaries (cut-point indices): {list(assignment.boundaries)}")
    _emit(args, payload, "\n".join(lines))
    return 0


def _profile_from_sections(report):
    from .calibration import CalibrationProfile, CutpointTimes

    cps = []
    for us in report.section_compute_us:
        cps.append(CutpointTimes(
            forward_us={1: max(us, 1)},
            backward_us={1: max(2 * us, 2)},
            act_intra_us={1: 0}, grad_intra_us={1: 0},
            act_inter_mean_us={1: 0}, act_inter_jitter_us={1: 0},
            grad_inter_mean_us={1: 0}, grad_inter_jitter_us={1: 0},
            allreduce_us={1: 0},
        ))
    return CalibrationProfile(m_grid=(1,), d_grid=(1,), cutpoints=tuple(cps))


def _cmd_calibrate(args) -> int:
    jf = load_job_file(args.spec)
    try:
        m_grid = [int(x) for x in args.m_grid.split(",") if x]
    except ValueError:
        raise ConfigError(f"--m-grid: malformed list {args.m_grid!r}")
    if args.d_grid:
        try:
            d_grid = [int(x) for x in args.d_grid.split(",") if x]
        except ValueError:
            raise ConfigError(f"--d-grid: malformed list {args.d_grid!r}")
    else:
        d_grid = list(range(1, args.max_d + 1))
    profile = synthesize_profile(jf.model, jf.hardware, m_grid, d_grid,
                                 contention_multiplier=args.contention,
                                 allreduce_bandwidth=args.allreduce_bandwidth)
    save_profile(profile, args.out)
    print(f"wrote {args.out}: {profile.num_cutpoints} cut-points, "
          f"m grid {list(profile.m_grid)}, D grid 1..{max(profile.d_grid)}")
    return 0


def _cmd_gantt(args) -> int:
    # Re-render an SVG from a previously dumped gantt CSV.
    from .gantt import parse_gantt_csv, rows_to_svg

    try:
        with open(args.from_csv) as f:
            text = f.read()
    except FileNotFoundError:
        raise ConfigError(f"{args.from_csv}: file not found")
    try:
        rows = parse_gantt_csv(text)
    except ValueError as e:
        raise ConfigError(f"{args.from_csv}: {e}")
    with open(args.out, "w") as f:
        f.write(rows_to_svg(rows, title=args.from_csv))
    print(f"wrote {args.out}")
    return 0


def _cmd_schedule(args) -> int:
    gen = generate_varuna_schedule if args.policy == POLICY_VARUNA else generate_gpipe_schedule
    schedule = gen(args.stages, args.micro_batches, 1.0, 2.0, 1.0)
    sys.stdout.write(schedule_to_csv(schedule))
    return 0


if __name__ == "__main__":
    sys.exit(main())
