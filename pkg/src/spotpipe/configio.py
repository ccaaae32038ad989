"""Reading the structured config file shared by every subcommand.

One YAML file carries ``model``, ``hardware``, ``job`` and optionally
``cluster`` sections; the schema is documented in the README. Unknown keys are
rejected with the offending dotted path so typos fail loudly instead of
silently falling back to defaults.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import yaml

from .core import (
    ClusterState,
    ConfigError,
    HardwareSpec,
    JobSpec,
    ModelSpec,
    VM,
    make_block_model,
)

FORMAT_VERSION = 1

_MODEL_KEYS = {
    "name",
    "cutpoints",
    "parameters_per_cutpoint",
    "activation_bytes_per_cutpoint",
    "cutpoint_parameters",
    "cutpoint_activation_bytes",
    "input_bytes_per_example",
    "hidden_size",
    "sequence_length",
    "bytes_per_element",
}
_HARDWARE_KEYS = {
    "gpu_memory_bytes",
    "gpus_per_node",
    "intra_node_bandwidth",
    "inter_node_bandwidth",
    "inter_node_latency_us",
    "inter_node_jitter_us",
    "intra_node_latency_us",
}
_JOB_KEYS = {"minibatch_examples", "target_iterations", "checkpoint_interval"}
_VM_KEYS = {"id", "gpus", "node"}
_TOP_KEYS = {"format_version", "model", "hardware", "job", "cluster"}


@dataclass(frozen=True)
class JobFile:
    model: ModelSpec
    hardware: HardwareSpec
    job: JobSpec
    cluster: Optional[ClusterState]


def _require_mapping(value, path: str) -> dict:
    if not isinstance(value, dict):
        raise ConfigError(f"{path}: expected a mapping")
    return value


def _reject_unknown(mapping: dict, allowed: set, path: str) -> None:
    for key in mapping:
        if key not in allowed:
            raise ConfigError(f"{path}.{key}: unknown key")


def _get(mapping: dict, key: str, path: str, kind, required: bool = True, default=None):
    if key not in mapping:
        if required:
            raise ConfigError(f"{path}.{key}: missing required key")
        return default
    value = mapping[key]
    if kind is float and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    if not isinstance(value, kind) or isinstance(value, bool):
        name = kind.__name__ if isinstance(kind, type) else "/".join(k.__name__ for k in kind)
        raise ConfigError(f"{path}.{key}: expected {name}, got {value!r}")
    return value


def parse_model(node, path: str = "model") -> ModelSpec:
    node = _require_mapping(node, path)
    _reject_unknown(node, _MODEL_KEYS, path)
    name = _get(node, "name", path, str)
    if "cutpoint_parameters" in node:
        params = node["cutpoint_parameters"]
        acts = node.get("cutpoint_activation_bytes")
        if not isinstance(params, list) or acts is None or not isinstance(acts, list):
            raise ConfigError(
                f"{path}: cutpoint_parameters and cutpoint_activation_bytes "
                "must both be lists"
            )
        return ModelSpec(
            name=name,
            cutpoint_parameters=tuple(int(p) for p in params),
            cutpoint_activation_bytes=tuple(int(a) for a in acts),
            input_bytes_per_example=node.get("input_bytes_per_example"),
        )
    # Repeated-block form.
    k = _get(node, "cutpoints", path, int)
    if "hidden_size" in node:
        hidden = _get(node, "hidden_size", path, int)
        seq = _get(node, "sequence_length", path, int)
        bpe = _get(node, "bytes_per_element", path, int, required=False, default=2)
        ppc = _get(node, "parameters_per_cutpoint", path, int, required=False)
        return make_block_model(name, k, hidden, seq, bpe, params_per_block=ppc)
    ppc = _get(node, "parameters_per_cutpoint", path, int)
    act = _get(node, "activation_bytes_per_cutpoint", path, int)
    return ModelSpec(
        name=name,
        cutpoint_parameters=tuple([ppc] * k),
        cutpoint_activation_bytes=tuple([act] * k),
        input_bytes_per_example=node.get("input_bytes_per_example"),
    )


def parse_hardware(node, path: str = "hardware") -> HardwareSpec:
    node = _require_mapping(node, path)
    _reject_unknown(node, _HARDWARE_KEYS, path)
    return HardwareSpec(
        gpu_memory_bytes=_get(node, "gpu_memory_bytes", path, int),
        gpus_per_node=_get(node, "gpus_per_node", path, int, required=False, default=1),
        intra_node_bandwidth=_get(node, "intra_node_bandwidth", path, float),
        inter_node_bandwidth=_get(node, "inter_node_bandwidth", path, float),
        inter_node_latency_us=_get(node, "inter_node_latency_us", path, int),
        inter_node_jitter_us=_get(node, "inter_node_jitter_us", path, int, required=False, default=0),
        intra_node_latency_us=_get(node, "intra_node_latency_us", path, int, required=False, default=0),
    )


def parse_job(node, path: str = "job") -> JobSpec:
    node = _require_mapping(node, path)
    _reject_unknown(node, _JOB_KEYS, path)
    return JobSpec(
        minibatch_examples=_get(node, "minibatch_examples", path, int),
        target_iterations=_get(node, "target_iterations", path, int, required=False, default=1),
        checkpoint_interval=_get(node, "checkpoint_interval", path, int, required=False, default=1),
    )


def parse_cluster(node, path: str = "cluster") -> ClusterState:
    node = _require_mapping(node, path)
    _reject_unknown(node, {"vms"}, path)
    raw = node.get("vms")
    if not isinstance(raw, list):
        raise ConfigError(f"{path}.vms: expected a list")
    vms = []
    for i, entry in enumerate(raw):
        entry = _require_mapping(entry, f"{path}.vms[{i}]")
        _reject_unknown(entry, _VM_KEYS, f"{path}.vms[{i}]")
        vms.append(
            VM(
                vm_id=str(_get(entry, "id", f"{path}.vms[{i}]", (str, int))),
                gpus_on_vm=_get(entry, "gpus", f"{path}.vms[{i}]", int),
                node_id=str(_get(entry, "node", f"{path}.vms[{i}]", (str, int))),
            )
        )
    return ClusterState(vms=tuple(vms))


def load_yaml(path: str):
    try:
        with open(path) as f:
            return yaml.safe_load(f)
    except FileNotFoundError:
        raise ConfigError(f"{path}: file not found")
    except yaml.YAMLError as e:
        raise ConfigError(f"{path}: parse error: {e}")


def load_job_file(path: str) -> JobFile:
    doc = load_yaml(path)
    doc = _require_mapping(doc, path)
    _reject_unknown(doc, _TOP_KEYS, path)
    version = doc.get("format_version", FORMAT_VERSION)
    if version != FORMAT_VERSION:
        raise ConfigError(f"{path}.format_version: unsupported version {version}")
    for section in ("model", "hardware", "job"):
        if section not in doc:
            raise ConfigError(f"{path}.{section}: missing required section")
    cluster = parse_cluster(doc["cluster"]) if "cluster" in doc else None
    return JobFile(
        model=parse_model(doc["model"]),
        hardware=parse_hardware(doc["hardware"]),
        job=parse_job(doc["job"]),
        cluster=cluster,
    )
