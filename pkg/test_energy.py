"""
Energy model tests

1. Layer FLOPs for ANN and SNN layers
2. Published table reproduced from its FLOP counts
3. Firing-rate measurement and profiling on a small model
4. CSV and text reports
"""

import io

import numpy as np
import pytest
from pydantic import ValidationError

from conftest import toy_network_spec
from src.energy import (
    E_AC_DPJ,
    E_MAC_DPJ,
    PUBLISHED_ENERGY_ONLY,
    PUBLISHED_TABLE,
    back_derive_flops,
    estimate_energy,
    estimate_from_flops,
    format_published,
    format_report,
    layer_flops,
    measure_firing_rates,
    profile_model,
    published_comparison,
    write_report_csv,
)
from src.errors import ConfigError, UsageError
from src.models import LayerProfile
from src.network import HalsieModel


# Layer FLOPs
def test_ann_layer_flops():
    profile = LayerProfile(name="conv", kind="ANN", M=147_456, C=18)
    assert layer_flops(profile) == 2_654_208
    assert layer_flops(profile, timesteps=10) == 2_654_208


def test_snn_layer_flops_scale_with_rate_and_timesteps():
    profile = LayerProfile(name="conv", kind="SNN", M=147_456, C=18, F=0.1)
    assert layer_flops(profile, timesteps=10) == 2_654_208
    silent = LayerProfile(name="conv", kind="SNN", M=147_456, C=18, F=0.0)
    assert layer_flops(silent, timesteps=10) == 0


def test_ann_layer_must_have_unit_rate():
    with pytest.raises(ValidationError):
        LayerProfile(name="conv", kind="ANN", M=1, C=1, F=0.5)


def test_timesteps_must_be_positive():
    with pytest.raises(ConfigError):
        layer_flops(LayerProfile(name="conv", kind="SNN", M=1, C=1, F=1.0), timesteps=0)


def test_energy_grows_with_firing_rate():
    energies = [
        estimate_energy([LayerProfile(name="s", kind="SNN", M=1000, C=9, F=f)], timesteps=10).energy_dpj
        for f in (0.0, 0.05, 0.1, 0.5)
    ]
    assert energies == sorted(energies)
    assert energies[0] == 0


def test_mixed_layers_are_priced_per_kind():
    report = estimate_energy([
        LayerProfile(name="a", kind="ANN", M=100, C=9),
        LayerProfile(name="s", kind="SNN", M=100, C=9, F=0.5),
    ], timesteps=4)
    assert report.flops_ann == 900
    assert report.flops_snn == 1800
    assert report.energy_dpj == 900 * E_MAC_DPJ + 1800 * E_AC_DPJ
    assert [layer.flops for layer in report.layers] == [900, 1800]


# Published numbers
def test_mac_to_ac_ratio():
    assert round(E_MAC_DPJ / E_AC_DPJ, 1) == 5.1


def test_hybrid_row_energy():
    report = estimate_from_flops(3.84e9, 0.267e9)
    assert report.energy_dpj == 179_043_000_000
    assert report.e_total_mj == pytest.approx(17.9043, abs=1e-9)


@pytest.mark.parametrize("row", PUBLISHED_TABLE, ids=[r.network for r in PUBLISHED_TABLE])
def test_published_rows_reproduce_within_half_percent(row):
    reproduced = estimate_from_flops(row.flops_ann, row.flops_snn).e_total_mj
    assert reproduced == pytest.approx(row.e_mj, rel=5e-3)


def test_comparison_lists_every_row():
    assert [row for row, _ in published_comparison()] == list(PUBLISHED_TABLE)


def test_back_derived_flops():
    assert back_derive_flops(338.65, "ANN") == pytest.approx(73.62e9, rel=5e-3)
    assert back_derive_flops(48.91, "SNN") == pytest.approx(54.34e9, rel=5e-3)
    for row in PUBLISHED_ENERGY_ONLY:
        assert back_derive_flops(row.e_mj, row.kind) > 0
    with pytest.raises(ConfigError):
        back_derive_flops(1.0, "Hybrid")


def test_negative_flops_are_rejected():
    with pytest.raises(ConfigError):
        estimate_from_flops(-1.0, 0.0)


# Profiling
def test_firing_rates_need_samples(toy_spec):
    with pytest.raises(UsageError):
        measure_firing_rates(HalsieModel(toy_spec), [])


def test_profile_counts_every_convolution(toy_spec, toy_inputs):
    frames, volumes, _ = toy_inputs
    model = HalsieModel(toy_spec)
    samples = [(frames[i:i + 1], volumes[i:i + 1]) for i in range(2)]
    report = profile_model(model, samples)
    assert len(report.layers) == len(list(model.conv_layers()))
    kinds = {layer.name: layer.kind for layer in report.layers}
    assert kinds["tfe.stages.0.conv"] == "SNN"
    assert kinds["sfe.stages.0.conv"] == "ANN"
    assert report.timesteps == toy_spec.bins
    assert report.flops_ann > 0
    assert model.training


def test_silent_network_counts_only_input_density():
    """Without spikes the second spiking conv costs nothing; the first pays for input density."""
    spec = toy_network_spec()
    model = HalsieModel(spec, setting="C")
    for _, layer in model.lif_layers():
        layer.v_th.data[:] = 1e30
    volume = np.zeros((1, spec.bins, 2, 16, 16), dtype=np.float32)
    volume[:, :, 1, 3, 5] = 1.0
    frame = np.zeros((1, 1, 16, 16), dtype=np.float32)
    report = profile_model(model, [(frame, volume)])
    layers = {layer.name: layer for layer in report.layers}
    first, second = layers["tfe.stages.0.conv"], layers["tfe.stages.1.conv"]
    assert first.F == pytest.approx(1 / 512)
    assert first.flops == round(spec.bins * first.M * first.C / 512)
    assert second.flops == 0
    assert report.flops_snn == first.flops


def test_rates_average_over_samples(toy_spec):
    model = HalsieModel(toy_spec, setting="C")
    dense = np.ones((1, 2, 2, 16, 16), dtype=np.float32)
    sparse = np.zeros_like(dense)
    frame = np.zeros((1, 1, 16, 16), dtype=np.float32)
    rates = measure_firing_rates(model, [(frame, dense), (frame, sparse)])
    assert rates["tfe.stages.0.conv"] == pytest.approx(0.5)


# Reports
def test_report_csv_has_layers_and_total():
    report = estimate_energy([
        LayerProfile(name="a", kind="ANN", M=10, C=9),
        LayerProfile(name="s", kind="SNN", M=10, C=9, F=0.25),
    ], timesteps=2)
    buffer = io.StringIO()
    write_report_csv(report, buffer)
    lines = buffer.getvalue().splitlines()
    assert lines[0] == "layer,kind,M,C,F,flops"
    assert lines[1].startswith("a,ANN,10,9,")
    assert lines[-1] == "total,,,,,135"


def test_text_reports():
    assert "17.9043 mJ" in format_report(estimate_from_flops(3.84e9, 0.267e9))
    table = format_published()
    for row in PUBLISHED_TABLE:
        assert row.network in table
