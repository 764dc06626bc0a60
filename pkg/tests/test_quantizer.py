import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from vitdfq.quantizer import (QuantParams, Observer, make_params, quantize, dequantize, fake_quantize, quantization_mse,
                              observe, save_quant_table, load_quant_table, SYMMETRIC, ASYMMETRIC)
from vitdfq.exceptions import ConfigurationError, ContractError, ModelStateError

finite = st.floats(min_value=-1e3, max_value=1e3, allow_nan=False, allow_infinity=False).map(lambda x: round(x, 6))


@st.composite
def quant_params(draw):
    k = draw(st.integers(min_value=2, max_value=8))
    lo = draw(finite)
    width = draw(st.floats(min_value=1e-2, max_value=1e3))
    return QuantParams(k, lo, lo + width)


def test_quantize_examples():
    qp = QuantParams(8, 0.0, 255.0)
    assert quantize(torch.tensor([100.0]), qp).item() == 100
    assert quantize(torch.tensor([-2.0]), QuantParams(4, -1.0, 1.0)).item() == 0
    assert quantize(torch.tensor([6.5]), QuantParams(4, 0.0, 15.0)).item() == 7
    assert quantize(torch.tensor([400.0]), qp).item() == 255
    assert quantize(torch.tensor([1.0]), qp).dtype == torch.int64


def test_dequantize_ends():
    qp = QuantParams(4, -0.5, 2.5)
    assert dequantize(torch.tensor([0]), qp).item() == pytest.approx(-0.5)
    assert dequantize(torch.tensor([15]), qp).item() == pytest.approx(2.5)
    with pytest.raises(ContractError):
        dequantize(torch.tensor([16]), qp)
    with pytest.raises(ContractError):
        dequantize(torch.tensor([-1]), qp)


def test_params_validation():
    with pytest.raises(ConfigurationError):
        QuantParams(4, 1.0, 1.0)
    with pytest.raises(ConfigurationError):
        QuantParams(1, 0.0, 1.0)
    with pytest.raises(ConfigurationError):
        QuantParams(4, -1.0, 2.0, SYMMETRIC)
    with pytest.raises(ConfigurationError):
        QuantParams(4, 0.0, float('inf'))
    qp = QuantParams(4, -3.0, 3.0, SYMMETRIC)
    assert qp.step == pytest.approx(0.4)
    assert qp.levels == 15


@settings(max_examples=50, deadline=None)
@given(quant_params(), st.lists(finite, min_size=1, max_size=50))
def test_round_trip_bound(qp, values):
    v = torch.tensor(values, dtype=torch.float64)
    err = (v - fake_quantize(v, qp)).abs()
    inside = (v >= qp.clip_lo) & (v <= qp.clip_hi)
    assert (err[inside] <= qp.step / 2 * (1 + 1e-9) + 1e-9).all()
    outside_dist = torch.maximum(qp.clip_lo - v, v - qp.clip_hi)
    assert (err[~inside] <= outside_dist[~inside] + qp.step / 2 + 1e-9).all()


@pytest.mark.parametrize('k', [2, 4, 8])
@pytest.mark.parametrize('lo, hi', [(-1.3, 2.7), (0.0, 6.0), (-4.0, 4.0)])
def test_dense_grid_scan(k, lo, hi):
    qp = QuantParams(k, lo, hi)
    v = torch.linspace(lo, hi, 1_000_001, dtype=torch.float64)
    codes = quantize(v, qp)
    err = (v - dequantize(codes, qp, dtype=torch.float64)).abs()
    assert err.max().item() <= qp.step / 2 * (1 + 1e-12)
    assert (codes[1:] >= codes[:-1]).all()
    assert codes.unique().numel() == qp.levels + 1

    grid = qp.grid()
    assert torch.equal(fake_quantize(grid, qp), grid)


@settings(max_examples=50, deadline=None)
@given(quant_params(), st.lists(finite, min_size=2, max_size=50))
def test_monotone(qp, values):
    v = torch.tensor(sorted(values), dtype=torch.float64)
    codes = quantize(v, qp)
    assert (codes[1:] >= codes[:-1]).all()
    assert codes.min() >= 0 and codes.max() <= qp.levels


@settings(max_examples=30, deadline=None)
@given(quant_params())
def test_grid_fixed_points_and_idempotence(qp):
    grid = qp.grid()
    assert torch.allclose(fake_quantize(grid, qp), grid, atol=1e-9 * max(1.0, abs(qp.clip_lo), abs(qp.clip_hi)))
    v = torch.linspace(qp.clip_lo - 1, qp.clip_hi + 1, 97, dtype=torch.float64)
    once = fake_quantize(v, qp)
    assert torch.equal(fake_quantize(once, qp), once)


def test_observer_minmax():
    obs = Observer('minmax')
    observe(obs, torch.tensor([1.0, 3.0]))
    observe(obs, torch.tensor([-2.0, 2.0]))
    qp = obs.finalize(8)
    assert (qp.clip_lo, qp.clip_hi) == (-2.0, 3.0)


def test_observer_ema():
    obs = Observer('ema', beta=0.9)
    obs.observe(torch.tensor([0.0, 10.0]))
    obs.observe(torch.tensor([0.0, 20.0]))
    assert obs.max_val == pytest.approx(11.0)
    assert obs.min_val == 0.0


def test_empty_batch_is_noop():
    obs = Observer('percentile')
    obs.observe(torch.tensor([]))
    assert obs.num_batches == 0
    with pytest.raises(ModelStateError):
        obs.finalize(8)
    with pytest.raises(ModelStateError):
        Observer('omse').finalize_omse(4)


@pytest.mark.parametrize('strategy', ['minmax', 'ema', 'percentile', 'omse'])
def test_single_batch_clips_inside_extremes(strategy):
    x = torch.randn(1000, generator=torch.Generator().manual_seed(0))
    qp = Observer(strategy).observe(x).finalize(8)
    assert qp.clip_lo >= x.min().item() - 1e-12
    assert qp.clip_hi <= x.max().item() + 1e-12


def test_finalize_is_idempotent():
    obs = Observer('omse').observe(torch.randn(500, generator=torch.Generator().manual_seed(1)))
    assert obs.finalize(4) == obs.finalize(4)


def test_minmax_examples():
    obs = Observer('minmax').observe(torch.tensor([-1.0, 0.0, 4.0]))
    assert obs.finalize_minmax(8) == QuantParams(8, -1.0, 4.0)
    assert obs.finalize_minmax(8, SYMMETRIC) == QuantParams(8, -4.0, 4.0, SYMMETRIC)


def test_degenerate_range_is_widened():
    qp = Observer('minmax').observe(torch.full((10,), 3.0)).finalize(8)
    assert qp.clip_lo < 3.0 < qp.clip_hi
    assert qp.clip_hi - qp.clip_lo < 1e-4
    assert make_params(0.0, 0.0, 8).clip_hi > 0.0


def test_percentile():
    obs = Observer('percentile', gamma=1e-5).observe(torch.arange(1, 100001, dtype=torch.float64))
    qp = obs.finalize(8)
    assert qp.clip_lo == pytest.approx(2.0, abs=1e-3)
    assert qp.clip_hi == pytest.approx(99999.0, abs=1e-3)


def test_percentile_zero_gamma_is_minmax():
    x = torch.randn(777, generator=torch.Generator().manual_seed(2))
    obs = Observer('percentile', gamma=0.0).observe(x)
    assert obs.finalize_percentile(8) == obs.finalize_minmax(8)


def test_percentile_symmetric_data():
    x = torch.rand(5000, generator=torch.Generator().manual_seed(3), dtype=torch.float64)
    qp = Observer('percentile', gamma=0.01).observe(torch.cat([x, -x])).finalize(8)
    assert qp.clip_lo == pytest.approx(-qp.clip_hi, abs=1e-9)


def test_omse_on_grid_points():
    grid = QuantParams(4, 0.0, 1.0).grid()
    obs = Observer('omse').observe(grid)
    qp = obs.finalize(4)
    assert qp == obs.finalize_minmax(4)
    assert quantization_mse(grid, qp) < 1e-20


def test_omse_clips_outlier():
    x = torch.rand(999, generator=torch.Generator().manual_seed(4), dtype=torch.float64)
    obs = Observer('omse').observe(torch.cat([x, torch.tensor([10.0], dtype=torch.float64)]))
    qp = obs.finalize(4)
    assert qp.clip_hi < 10.0


@settings(max_examples=25, deadline=None)
@given(st.lists(finite, min_size=2, max_size=200), st.integers(min_value=2, max_value=8))
def test_omse_never_worse_than_minmax(values, k):
    obs = Observer('omse').observe(torch.tensor(values, dtype=torch.float64))
    values = obs.values()
    assert quantization_mse(values, obs.finalize(k)) <= quantization_mse(values, obs.finalize_minmax(k))


def test_bad_observer_settings():
    with pytest.raises(ConfigurationError):
        Observer('median')
    with pytest.raises(ConfigurationError):
        Observer('ema', beta=1.0)
    with pytest.raises(ConfigurationError):
        Observer('percentile', gamma=0.5)


def test_quant_table_round_trip(tmp_path):
    params = {'layer1.attn.qkv_in': QuantParams(8, -0.123456789012345, 3.3),
              'layer1.attn.qkv.weight': QuantParams(8, -np.pi, np.pi, SYMMETRIC),
              'layer2.mlp.fc2_in': QuantParams(4, 0.1, 0.2, ASYMMETRIC)}
    path = tmp_path / 'q.csv'
    save_quant_table(params, path)
    assert load_quant_table(path) == params
