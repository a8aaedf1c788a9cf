import pytest
import torch

from cascade_sr.base_sr import BaseSRModel, BaseTrainingError, base_upsample, pretrain_base, validation_gain
from cascade_sr.checkpoint import load_base, save_base
from cascade_sr.data import make_synthetic_dataset


def test_identity_resolution_returns_input():
    x = torch.randn(3, 12, 17)
    assert torch.equal(base_upsample(x, (12, 17)), x)


def test_constant_image_any_target():
    x = torch.full((3, 16, 16), -0.42, dtype=torch.float64)
    for size in [(16, 33), (40, 40), (97, 61)]:
        assert float((base_upsample(x, size) + 0.42).abs().max()) < 1e-6


def test_horizontal_ramp_doubles_exactly():
    x = torch.arange(24, dtype=torch.float64) * 0.04 - 0.5
    img = x.expand(3, 10, 24).clone()
    out = base_upsample(img, (20, 48))
    j = torch.arange(48, dtype=torch.float64)
    expected = ((j + 0.5) / 2 - 0.5) * 0.04 - 0.5
    # two input pixels of border (four output pixels) touch the clamped edge
    assert float((out[..., 4:-4] - expected[4:-4]).abs().max()) < 1e-6


def test_target_smaller_than_input_rejected():
    with pytest.raises(ValueError):
        base_upsample(torch.zeros(3, 16, 16), (8, 32))


def test_residual_identity_within_rounding():
    z = torch.randn(1, 3, 32, 32, dtype=torch.float64)
    g = base_upsample(torch.randn(1, 3, 16, 16, dtype=torch.float64), (32, 32))
    back = (z - g) + g
    # one rounding of the subtraction plus one of the addition
    bound = 2 * torch.finfo(z.dtype).eps * torch.maximum(z.abs(), g.abs())
    assert bool(((back - z).abs() <= bound).all())


def test_mode_validation():
    with pytest.raises(ValueError):
        BaseSRModel("learned")
    with pytest.raises(ValueError):
        BaseSRModel("nearest")


def test_zero_epochs_fails_check():
    ds = make_synthetic_dataset(20, (32, 32), 0)
    with pytest.raises(BaseTrainingError):
        pretrain_base(ds, 0, seed=0)


def test_too_little_data():
    with pytest.raises(BaseTrainingError):
        pretrain_base(make_synthetic_dataset(3, (32, 32), 0), 1)


def test_same_seed_same_params(tmp_path):
    ds = make_synthetic_dataset(20, (32, 32), 0)
    a = pretrain_base(ds, 1, seed=4, check=False)
    b = pretrain_base(ds, 1, seed=4, check=False)
    sa, sb = a.net.state_dict(), b.net.state_dict()
    assert all(torch.equal(sa[k], sb[k]) for k in sa)
    save_base(a, tmp_path / "base.pt")
    c = load_base(tmp_path / "base.pt")
    x = torch.randn(1, 3, 16, 16)
    assert torch.equal(base_upsample(x, (37, 29), a), base_upsample(x, (37, 29), c))


@pytest.mark.slow
def test_toy_pretraining_beats_bicubic():
    ds = make_synthetic_dataset(200, (64, 64), 0)
    model = pretrain_base(ds, 10, seed=0)  # raises unless the x2 gain reaches 0.2 dB
    ours, ref = validation_gain(model, ds.split(20)[1])
    assert ours - ref >= 0.2
