# tests/test_optim.py

import numpy as np
import pytest

from exceptions import ConfigValidationError
from optim import ADAMW_WEIGHT_DECAY, AdamW, PlainDescent, make_optimizer
from tensor import Tensor, assign_grads


def _param(values):
    return Tensor(np.array(values, dtype=np.float64), requires_grad=True)


class TestAdamW:

    def test_default_decay_is_active(self):
        optimizer = make_optimizer("adamw", [_param([1.0])], lr=1e-3)
        assert isinstance(optimizer, AdamW)
        assert optimizer.weight_decay == ADAMW_WEIGHT_DECAY > 0.0

    def test_decay_is_decoupled_from_gradient(self):
        p = _param([2.0, -4.0])
        optimizer = AdamW([p], lr=0.1, weight_decay=0.5)
        assign_grads([p], np.zeros(2))
        optimizer.step()
        # нульовий градієнт: крок Adam нульовий, лишається тільки множник (1 − lr·wd)
        np.testing.assert_allclose(p.data, [2.0 * 0.95, -4.0 * 0.95], rtol=1e-15)

    def test_first_step_is_sign_scaled_without_decay(self):
        p = _param([1.0, 1.0])
        optimizer = AdamW([p], lr=0.1, weight_decay=0.0)
        assign_grads([p], np.array([3.0, -0.5]))
        optimizer.step()
        np.testing.assert_allclose(p.data, [0.9, 1.1], rtol=1e-7)

    def test_decay_adds_to_adam_step(self):
        plain, decayed = _param([1.0]), _param([1.0])
        a = AdamW([plain], lr=0.1, weight_decay=0.0)
        b = AdamW([decayed], lr=0.1, weight_decay=0.2)
        for p in (plain, decayed):
            assign_grads([p], np.array([1.0]))
        a.step()
        b.step()
        assert decayed.data[0] == pytest.approx(plain.data[0] - 0.1 * 0.2 * 1.0, rel=1e-12)

    def test_missing_gradient_is_skipped(self):
        p = _param([1.0])
        AdamW([p], lr=0.1).step()
        assert p.data[0] == 1.0

    @pytest.mark.parametrize("kwargs", [{"lr": 0.0}, {"beta1": 1.0}, {"weight_decay": -0.1}])
    def test_invalid_arguments(self, kwargs):
        with pytest.raises(ConfigValidationError):
            AdamW([_param([1.0])], **kwargs)


class TestFactory:

    def test_sgd_is_plain_descent(self):
        p = _param([1.0, 2.0])
        optimizer = make_optimizer("sgd", [p], lr=0.5)
        assert isinstance(optimizer, PlainDescent)
        assign_grads([p], np.array([1.0, -2.0]))
        optimizer.step()
        np.testing.assert_array_equal(p.data, [0.5, 3.0])

    def test_unknown_name(self):
        with pytest.raises(ConfigValidationError):
            make_optimizer("lion", [_param([1.0])], lr=0.1)
