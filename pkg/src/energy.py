"""
Inference cost model: FLOPs per convolution and 45nm compute energy.

    FLOPs_ANN = sum_l M_l * C_l
    FLOPs_SNN = N * sum_l M_l * C_l * F_l
    E_total   = FLOPs_ANN * 4.6 pJ + FLOPs_SNN * 0.9 pJ

Energies are integers in units of 0.1 pJ; only reports convert to mJ.
BN, activations, memory traffic and bias additions are not counted.
"""

import csv
import logging
from typing import Dict, Iterable, List, NamedTuple, Optional, Sequence, TextIO, Tuple

import numpy as np

from .errors import ConfigError, UsageError
from .models import EnergyReport, LayerEnergy, LayerProfile

logger = logging.getLogger(__name__)

E_MAC_DPJ = 46  # 4.6 pJ
E_AC_DPJ = 9  # 0.9 pJ
DPJ_PER_MJ = 10 ** 10
CSV_COLUMNS = ("layer", "kind", "M", "C", "F", "flops")


class PublishedRow(NamedTuple):
    network: str
    kind: str
    flops_ann: Optional[float]
    flops_snn: Optional[float]
    e_mj: float


# DDD-17 comparison; FLOPs in absolute counts
PUBLISHED_TABLE: Tuple[PublishedRow, ...] = (
    PublishedRow("EV-SegNet", "ANN", 73.62e9, 0.0, 338.65),
    PublishedRow("EvDistill", "ANN", 12.45e9, 0.0, 57.27),
    PublishedRow("DTL", "ANN", 16.74e9, 0.0, 77.01),
    PublishedRow("Spiking-Deeplab", "SNN", 0.0, 54.34e9, 48.91),
    PublishedRow("E2ViD", "ANN", 16.65e9, 0.0, 76.59),
    PublishedRow("EV-Transfer", "ANN", 7.88e9, 0.0, 36.25),
    PublishedRow("ViD2E", "ANN", 73.62e9, 0.0, 338.65),
    PublishedRow("ESS", "ANN", 14.22e9, 0.0, 65.41),
    PublishedRow("HALSIE", "Hybrid", 3.84e9, 0.267e9, 17.89),
)

# Rows published with energy only (MVSEC and DSEC comparisons)
PUBLISHED_ENERGY_ONLY: Tuple[PublishedRow, ...] = (
    PublishedRow("EvDistill (MVSEC)", "ANN", None, None, 101.84),
    PublishedRow("DTL (MVSEC)", "ANN", None, None, 136.89),
    PublishedRow("EV-Transfer (DSEC)", "ANN", None, None, 197.48),
    PublishedRow("E2ViD (DSEC)", "ANN", None, None, 416.99),
    PublishedRow("EV-SegNet (DSEC)", "ANN", None, None, 1863.83),
    PublishedRow("ESS (DSEC)", "ANN", None, None, 356.32),
)


def layer_flops(profile: LayerProfile, timesteps: int = 1) -> int:
    """M*C for ANN layers (always one timestep), N*M*C*F for SNN layers."""
    if timesteps < 1:
        raise ConfigError(f"timesteps must be >= 1, got {timesteps}")
    if profile.kind == "ANN":
        return profile.M * profile.C
    return int(round(timesteps * profile.M * profile.C * profile.F))


def energy_from_flops(flops_ann: float, flops_snn: float) -> int:
    """Total energy in 0.1 pJ units; FLOPs are rounded to whole operations."""
    return int(round(flops_ann)) * E_MAC_DPJ + int(round(flops_snn)) * E_AC_DPJ


def estimate_from_flops(flops_ann: float, flops_snn: float,
                        sample_set: str = "published FLOPs") -> EnergyReport:
    if flops_ann < 0 or flops_snn < 0:
        raise ConfigError("FLOP counts must be non-negative")
    return EnergyReport(
        flops_ann=int(round(flops_ann)),
        flops_snn=int(round(flops_snn)),
        energy_dpj=energy_from_flops(flops_ann, flops_snn),
        sample_set=sample_set,
    )


def estimate_energy(profiles: Iterable[LayerProfile], timesteps: int = 1,
                    sample_set: str = "layer profiles") -> EnergyReport:
    """Aggregate layer_flops by kind and price them."""
    layers: List[LayerEnergy] = []
    totals = {"ANN": 0, "SNN": 0}
    for profile in profiles:
        flops = layer_flops(profile, timesteps)
        totals[profile.kind] += flops
        layers.append(LayerEnergy(**profile.model_dump(), flops=flops))
    return EnergyReport(
        flops_ann=totals["ANN"],
        flops_snn=totals["SNN"],
        energy_dpj=totals["ANN"] * E_MAC_DPJ + totals["SNN"] * E_AC_DPJ,
        timesteps=timesteps,
        sample_set=sample_set,
        layers=layers,
    )


def back_derive_flops(e_mj: float, kind: str = "ANN") -> float:
    """FLOPs implied by a published energy if every operation were a MAC (ANN) or an AC (SNN)."""
    per_op = {"ANN": E_MAC_DPJ, "SNN": E_AC_DPJ}.get(kind)
    if per_op is None:
        raise ConfigError(f"unknown layer kind '{kind}'")
    return e_mj * DPJ_PER_MJ / per_op


def published_comparison() -> List[Tuple[PublishedRow, float]]:
    """Each published row with FLOPs next to the energy reproduced from them."""
    return [
        (row, estimate_from_flops(row.flops_ann, row.flops_snn).e_total_mj)
        for row in PUBLISHED_TABLE
    ]


# Measurement on a model
def measure_firing_rates(model, samples: Sequence[Tuple[np.ndarray, np.ndarray]]) -> Dict[str, float]:
    """
    Mean input spike rate of every spiking convolution over a sample set.

    Args:
        model: HalsieModel; run in eval mode without a tape
        samples: (frame, volume) pairs, one sample each

    Returns:
        conv name -> F, averaged over samples, timesteps and neurons
    """
    if len(samples) == 0:
        raise UsageError("cannot measure firing rates on an empty sample set")
    was_training = model.training
    model.eval()
    per_sample: List[Dict[str, float]] = []
    try:
        for frame, volume in samples:
            model.last_rates = {}
            model.forward(frame, volume)
            rates = {}
            for encoder, values in model.last_rates.items():
                for stage, value in enumerate(values):
                    rates[f"{encoder}.stages.{stage}.conv"] = value
            per_sample.append(rates)
    finally:
        model.train(was_training)

    names = sorted(per_sample[0])
    # np.mean uses pairwise summation, so the result does not depend on fan-out order
    return {name: float(np.mean([r[name] for r in per_sample])) for name in names}


def profile_model(model, samples: Sequence[Tuple[np.ndarray, np.ndarray]],
                  timesteps: Optional[int] = None, sample_set: Optional[str] = None) -> EnergyReport:
    """Profiles for every convolution of `model`, SNN rates measured on `samples`."""
    rates = measure_firing_rates(model, samples)
    profiles = []
    for name, conv in model.conv_layers():
        if conv.last_output_shape is None:
            continue
        m = int(np.prod(conv.last_output_shape[1:]))
        if conv.spiking:
            profiles.append(LayerProfile(name=name, kind="SNN", M=m, C=conv.synapses, F=rates.get(name, 0.0)))
        else:
            profiles.append(LayerProfile(name=name, kind="ANN", M=m, C=conv.synapses))
    steps = timesteps or model.spec.bins
    report = estimate_energy(profiles, steps, sample_set or f"{len(samples)} samples")
    logger.info("Profiled %d convolutions: %.4f mJ per inference", len(profiles), report.e_total_mj)
    return report


# Output
def write_report_csv(report: EnergyReport, stream: TextIO) -> None:
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for layer in report.layers:
        writer.writerow([layer.name, layer.kind, layer.M, layer.C, f"{layer.F:.6f}", layer.flops])
    writer.writerow(["total", "", "", "", "", report.flops_ann + report.flops_snn])


def format_report(report: EnergyReport) -> str:
    lines = ["=" * 72, f"INFERENCE ENERGY ({report.sample_set}, N={report.timesteps})", "=" * 72]
    if report.layers:
        lines.append(f"{'layer':<34}{'kind':<6}{'M':>10}{'C':>7}{'F':>8}{'FLOPs':>14}")
        lines.append("-" * 72)
        for layer in report.layers:
            lines.append(
                f"{layer.name:<34}{layer.kind:<6}{layer.M:>10}{layer.C:>7}{layer.F:>8.4f}{layer.flops:>14}"
            )
        lines.append("-" * 72)
    lines.append(f"FLOPs ANN: {report.flops_ann / 1e9:.4f} x 10^9")
    lines.append(f"FLOPs SNN: {report.flops_snn / 1e9:.4f} x 10^9")
    lines.append(f"E total:   {report.e_total_mj:.4f} mJ")
    lines.append("=" * 72)
    return "\n".join(lines)


def format_published() -> str:
    lines = ["=" * 72, "PUBLISHED ENERGY TABLE", "=" * 72,
             f"{'network':<18}{'kind':<8}{'ANN e9':>10}{'SNN e9':>10}{'published':>12}{'reproduced':>12}"]
    for row, reproduced in published_comparison():
        lines.append(
            f"{row.network:<18}{row.kind:<8}{row.flops_ann / 1e9:>10.3f}{row.flops_snn / 1e9:>10.3f}"
            f"{row.e_mj:>12.2f}{reproduced:>12.2f}"
        )
    lines.append("-" * 72)
    lines.append("Energy-only rows, FLOPs back-derived as all-MAC:")
    for row in PUBLISHED_ENERGY_ONLY:
        lines.append(f"{row.network:<24}{row.e_mj:>10.2f} mJ  ~{back_derive_flops(row.e_mj, row.kind) / 1e9:.2f} x 10^9")
    lines.append("=" * 72)
    return "\n".join(lines)
