"""Roofline-style latency model for batched parallel-path decoding.

A decode step is modeled as the slower of its memory and compute times:

    memory_time  = (bytes_per_weight_pass + P * kv_bytes_per_token_per_slot * L) / bandwidth
    compute_time = P * flops_per_token / throughput
    step_time    = max(memory_time, compute_time)

Weights are read once per step regardless of the path count P, so in the
weight-dominated regime decoding many paths costs little more than one.
``tokens_per_path`` (L) is the per-path context the step reads.
"""

import json
from dataclasses import dataclass
from importlib import resources

from .errors import ConfigError

PROFILE_FORMAT = "ptprofile-1"
DEFAULT_PROFILE_NAME = "decoder_1p5b_hbm.json"


@dataclass(frozen=True)
class CostModelParams:
    bytes_per_weight_pass: float
    kv_bytes_per_token_per_slot: float
    flops_per_token: float
    memory_bandwidth: float  # bytes/s
    compute_throughput: float  # flops/s
    paths: int
    tokens_per_path: int

    def __post_init__(self):
        numeric = (
            self.bytes_per_weight_pass,
            self.kv_bytes_per_token_per_slot,
            self.flops_per_token,
            self.memory_bandwidth,
            self.compute_throughput,
            self.paths,
            self.tokens_per_path,
        )
        if any(v <= 0 for v in numeric):
            raise ConfigError("all cost-model parameters must be positive")


def memory_time(params: CostModelParams) -> float:
    moved = (
        params.bytes_per_weight_pass
        + params.paths * params.kv_bytes_per_token_per_slot * params.tokens_per_path
    )
    return moved / params.memory_bandwidth


def compute_time(params: CostModelParams) -> float:
    return params.paths * params.flops_per_token / params.compute_throughput


def predict_step_time(params: CostModelParams) -> float:
    """Seconds for one decode step at a context of tokens_per_path slots."""
    return max(memory_time(params), compute_time(params))


def predict_decode_time(params: CostModelParams) -> float:
    """Seconds to decode tokens_per_path tokens on every path.

    Sums per-step roofline times while the context grows from 1 to L.
    """
    weight_t = params.bytes_per_weight_pass / params.memory_bandwidth
    kv_rate = params.paths * params.kv_bytes_per_token_per_slot / params.memory_bandwidth
    comp_t = compute_time(params)
    total = 0.0
    for context in range(1, params.tokens_per_path + 1):
        total += max(weight_t + kv_rate * context, comp_t)
    return total


def load_profile(path: str | None = None) -> dict:
    """Hardware/model byte and flop figures; default is the packaged profile."""
    if path is None:
        text = (
            resources.files("parcot.profiles").joinpath(DEFAULT_PROFILE_NAME).read_text()
        )
    else:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    profile = json.loads(text)
    if profile.get("format") != PROFILE_FORMAT:
        raise ConfigError(f"unsupported profile format {profile.get('format')!r}")
    return profile


def params_from_profile(profile: dict, paths: int, tokens_per_path: int) -> CostModelParams:
    return CostModelParams(
        bytes_per_weight_pass=float(profile["bytes_per_weight_pass"]),
        kv_bytes_per_token_per_slot=float(profile["kv_bytes_per_token_per_slot"]),
        flops_per_token=float(profile["flops_per_token"]),
        memory_bandwidth=float(profile["memory_bandwidth"]),
        compute_throughput=float(profile["compute_throughput"]),
        paths=paths,
        tokens_per_path=tokens_per_path,
    )
