import math

import pytest
import torch

from cloudmamba.errors import ConfigError, ShapeError
from cloudmamba.losses import (LossConfig, bce_loss, deep_supervision_loss, dice_loss, downsample_nearest, loss_terms,
                               seg_loss, total_loss)
from cloudmamba.refine import ModelOutput
from helpers import gradient_error


def full(value, n=4, shape=None):
    return torch.full(shape or (1, 1, 1, n), value, dtype=torch.float64)


class TestBCE:
    def test_half_is_ln2(self):
        y = torch.tensor([[[[0.0, 1.0, 1.0, 0.0, 1.0]]]], dtype=torch.float64)
        assert abs(bce_loss(full(0.5, 5), y).item() - math.log(2)) <= 1e-12

    def test_single_pixel(self):
        assert bce_loss(full(0.9, 1), full(1.0, 1)).item() == pytest.approx(0.105361, abs=1e-6)

    def test_saturated_is_finite(self):
        loss = bce_loss(full(0.0, 3), full(1.0, 3))
        assert loss.item() == pytest.approx(-math.log(1e-7), rel=1e-6)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            bce_loss(full(0.5, 3), full(1.0, 4))


class TestDice:
    def test_perfect_is_zero(self):
        y = (torch.rand(3, 1, 8, 8) > 0.5).double()
        assert dice_loss(y, y).item() == 0.0

    def test_both_empty_is_zero(self):
        assert dice_loss(full(0.0), full(0.0)).item() == 0.0

    def test_all_false_positive(self):
        assert dice_loss(full(1.0), full(0.0)).item() == pytest.approx(0.8, abs=1e-15)

    def test_per_image_average(self):
        p = torch.cat([full(1.0), full(0.0)])
        assert dice_loss(p, torch.zeros_like(p)).item() == pytest.approx(0.4, abs=1e-15)

    @pytest.mark.parametrize("seed", range(5))
    def test_dice_f1_link(self, seed):
        from cloudmamba.metrics import confusion_counts, f1
        gen = torch.Generator().manual_seed(seed)
        pred = (torch.rand(1, 1, 12, 12, generator=gen) > 0.5).double()
        label = (torch.rand(1, 1, 12, 12, generator=gen) > 0.6).double()
        eps = 1e-3
        score = f1(confusion_counts(pred[0, 0].numpy(), label[0, 0].numpy()))
        assert abs((1 - dice_loss(pred, label, eps).item()) - score) <= eps / (pred.sum() + label.sum()).item()


class TestComposite:
    def test_closed_form(self):
        assert seg_loss(full(0.5), full(1.0)).item() == pytest.approx(0.978861, abs=1e-6)

    def test_weights(self):
        p, y = full(0.5), full(1.0)
        assert seg_loss(p, y, LossConfig(lambda_dice=0)).item() == pytest.approx(math.log(2), abs=1e-12)
        assert seg_loss(p, y, LossConfig(lambda_bce=0)).item() == pytest.approx(2 / 7, abs=1e-12)

    def test_finite_difference(self):
        gen = torch.Generator().manual_seed(0)
        p = (torch.rand(2, 1, 4, 4, generator=gen, dtype=torch.float64) * 0.8 + 0.1).requires_grad_()
        y = (torch.rand(2, 1, 4, 4, generator=gen) > 0.5).double()
        assert gradient_error(lambda: seg_loss(p, y), [p], h=1e-6) <= 1e-5

    @pytest.mark.parametrize("kwargs", [{"lambda_bce": -1}, {"eps": 0}, {"ds_weights": [1, -1]}])
    def test_config_validation(self, kwargs):
        with pytest.raises(ConfigError):
            LossConfig(**kwargs)


class TestDeepSupervision:
    def test_top_left_sampling(self):
        y = torch.arange(16.0).reshape(1, 1, 4, 4)
        assert downsample_nearest(y, 2)[0, 0].tolist() == [[0, 2], [8, 10]]

    def test_default_alphas(self):
        assert LossConfig().alphas(4) == [1.0, 0.5, 0.25, 0.125]
        with pytest.raises(ConfigError):
            LossConfig(ds_weights=[1.0]).alphas(2)

    def test_single_level_equals_seg_loss(self):
        p, y = torch.rand(1, 1, 4, 4), (torch.rand(1, 1, 4, 4) > 0.5).float()
        assert torch.equal(deep_supervision_loss([p], y), seg_loss(p, y))

    def test_zero_weights(self):
        aux = [torch.rand(1, 1, 8, 8), torch.rand(1, 1, 4, 4)]
        y = (torch.rand(1, 1, 8, 8) > 0.5).float()
        assert deep_supervision_loss(aux, y, LossConfig(ds_weights=[0, 0])).item() == 0.0

    def test_weighted_sum(self):
        aux = [torch.rand(1, 1, 8, 8), torch.rand(1, 1, 4, 4)]
        y = (torch.rand(1, 1, 8, 8) > 0.5).float()
        expected = seg_loss(aux[0], y) + 0.5 * seg_loss(aux[1], y[..., ::2, ::2])
        assert torch.allclose(deep_supervision_loss(aux, y), expected)

    def test_resolution_mismatch(self):
        with pytest.raises(ShapeError):
            deep_supervision_loss([torch.rand(1, 1, 8, 8), torch.rand(1, 1, 8, 8)], torch.zeros(1, 1, 8, 8))


class TestTotal:
    def output(self, refined=True, value=None):
        y = (torch.rand(1, 1, 8, 8) > 0.5).float()
        make = (lambda t: t.clone()) if value == "perfect" else (lambda t: torch.rand_like(t))
        aux = [make(y), make(y[..., ::2, ::2])]
        return ModelOutput(make(y), aux, make(y) if refined else None, torch.zeros_like(y)), y

    def test_terms_and_sum(self):
        out, y = self.output()
        terms = loss_terms(out, y)
        assert list(terms) == ["seg_coarse", "seg_refined", "deep_supervision_1", "deep_supervision_2"]
        assert torch.allclose(total_loss(out, y), sum(terms.values()))
        assert total_loss(out, y).item() >= 0

    def test_refiner_flag_off_matches_single_stage(self):
        out, y = self.output()
        single = ModelOutput(out.coarse, out.aux, None, out.uncertainty)
        assert torch.equal(total_loss(out, y, LossConfig(supervise_refined=False)), total_loss(single, y))

    def test_perfect_prediction_near_zero(self):
        out, y = self.output(value="perfect")
        assert total_loss(out, y).item() < 1e-5
