"""Analytic FLOPs and retained-ratio accounting.

Per transformer layer the prefill phase costs 4nd^2 + 2n^2d + 2ndm FLOPs
(QKV + output projections, attention, FFN) and the decode phase costs
R(4d^2 + 2dm) + 2 * sum_{i=1..R} d*(n+i), where n is the context length the
cache holds during decode. All arithmetic is exact Python integers, so
reports are bit-reproducible; display helpers round to 3 significant digits
of tera-FLOPs.
"""

from __future__ import annotations

from dataclasses import dataclass

from .attention import ModelDims
from .tokens import CompressionConfig


@dataclass(frozen=True)
class CostInputs:
    dims: ModelDims
    prompt_tokens: int  # n at prefill: retained visual + text
    decode_steps: int  # R
    active_tokens: int  # context length inside the decode attention term

    def __post_init__(self) -> None:
        if self.prompt_tokens < 0 or self.active_tokens < 0:
            raise ValueError("token counts must be >= 0")
        if self.decode_steps < 1:
            raise ValueError(f"decode_steps must be >= 1, got {self.decode_steps}")


@dataclass(frozen=True)
class CostReport:
    prefill_flops: int
    decode_flops: int
    total_flops: int
    retained_ratio_stage1: float
    retained_ratio_final: float
    flops_ratio_vs_full: float

    def to_json(self) -> dict:
        return {
            "prefill_flops": self.prefill_flops,
            "decode_flops": self.decode_flops,
            "total_flops": self.total_flops,
            "total_tflops": tera(self.total_flops),
            "retained_ratio_stage1": self.retained_ratio_stage1,
            "retained_ratio_final": self.retained_ratio_final,
            "flops_ratio_vs_full": self.flops_ratio_vs_full,
        }


def tera(flops: int) -> float:
    """FLOPs in tera, 3 significant digits."""
    if flops == 0:
        return 0.0
    return float(f"{flops / 1e12:.3g}")


def prefill_flops(inputs: CostInputs) -> int:
    n = inputs.prompt_tokens
    d = inputs.dims.hidden
    m = inputs.dims.ffn_inner
    return inputs.dims.layers * (4 * n * d * d + 2 * n * n * d + 2 * n * d * m)


def decode_flops(inputs: CostInputs) -> int:
    n = inputs.active_tokens
    d = inputs.dims.hidden
    m = inputs.dims.ffn_inner
    r = inputs.decode_steps
    per_layer = r * (4 * d * d + 2 * d * m) + 2 * (d * n * r + d * r * (r + 1) // 2)
    return inputs.dims.layers * per_layer


def total_flops(inputs: CostInputs) -> int:
    return prefill_flops(inputs) + decode_flops(inputs)


def retained_ratio(config: CompressionConfig) -> tuple[float, float]:
    """Idealized (stage-1, final) retained fractions.

    Full windows prune 3 of 4 frames at k_rate, so stage 1 keeps
    1 - 0.75*k_rate; stage 2 then keeps (1 - p_rate) of that.
    """
    config.validate()
    stage1 = 1.0 - 0.75 * config.k_rate
    return stage1, stage1 * (1.0 - config.p_rate)


def flops_ratio(
    config: CompressionConfig,
    dims: ModelDims,
    n_visual: int,
    n_text: int = 0,
    decode_steps: int = 100,
) -> float:
    """Compressed total FLOPs over full-token total FLOPs.

    Compressed prefill runs on stage-1 retained visual tokens + text;
    compressed decode attends over final retained visual tokens + text.
    """
    stage1, final = retained_ratio(config)
    n1 = round(stage1 * n_visual)
    n2 = round(final * n_visual)
    compressed = total_flops(CostInputs(dims, n1 + n_text, decode_steps, n2 + n_text))
    full = total_flops(CostInputs(dims, n_visual + n_text, decode_steps, n_visual + n_text))
    return compressed / full


def compression_report(
    config: CompressionConfig,
    dims: ModelDims,
    n_visual: int,
    n_text: int = 0,
    decode_steps: int = 100,
) -> CostReport:
    """CostReport for a compressed run, with the full-token run as baseline."""
    stage1, final = retained_ratio(config)
    n1 = round(stage1 * n_visual)
    n2 = round(final * n_visual)
    inputs = CostInputs(dims, n1 + n_text, decode_steps, n2 + n_text)
    pre = prefill_flops(inputs)
    dec = decode_flops(inputs)
    return CostReport(
        prefill_flops=pre,
        decode_flops=dec,
        total_flops=pre + dec,
        retained_ratio_stage1=stage1,
        retained_ratio_final=final,
        flops_ratio_vs_full=flops_ratio(config, dims, n_visual, n_text, decode_steps),
    )
