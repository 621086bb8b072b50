import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fcp.autodiff import ContractError, DegenerateInputError, DimensionError, Tensor, grad_check
from fcp.losses import (
    LossConfig,
    bce_loss,
    dice_loss,
    guide_loss,
    ortho_loss,
    pairwise_cosine_offdiag,
    prompt_loss,
    total_loss,
)

EPS = 1e-7


def bce_oracle(p, g, eps=EPS):
    p = np.clip(p, eps, 1 - eps)
    return float(-np.mean(g * np.log(p) + (1 - g) * np.log(1 - p)))


def dice_oracle(p, g):
    den = (g * g).sum() + (p * p).sum()
    return 0.0 if den == 0 else float(1 - 2 * (g * p).sum() / den)


def cos_loop_oracle(maps):
    n = maps.shape[0]
    flat = maps.reshape(n, -1)
    total = 0.0
    for i in range(n):
        for j in range(n):
            if i != j:
                total += flat[i] @ flat[j] / (np.linalg.norm(flat[i]) * np.linalg.norm(flat[j]))
    return total


def random_binary(rng, shape, p=0.4):
    g = (rng.random(shape) < p).astype(float)
    g.flat[0] = 1.0
    return g


# -- bce / dice ----------------------------------------------------------------

def test_bce_half_map_is_ln2():
    rng = np.random.default_rng(0)
    for _ in range(10):
        g = random_binary(rng, (6, 7))
        assert bce_loss(np.full((6, 7), 0.5), g).item() == pytest.approx(math.log(2), abs=1e-9)


def test_bce_perfect_prediction_is_clamp_floor():
    g = random_binary(np.random.default_rng(1), (5, 5))
    assert bce_loss(g, g).item() == pytest.approx(-math.log(1 - EPS), rel=1e-6)


def test_bce_and_dice_match_formula_oracles():
    rng = np.random.default_rng(2)
    for _ in range(20):
        p = rng.random((8, 8))
        g = random_binary(rng, (8, 8))
        assert bce_loss(p, g).item() == pytest.approx(bce_oracle(p, g), abs=1e-12)
        assert dice_loss(p, g).item() == pytest.approx(dice_oracle(p, g), abs=1e-12)


def test_dice_identities():
    rng = np.random.default_rng(3)
    for _ in range(10):
        m = random_binary(rng, (6, 6))
        m.flat[-1] = 0.0
        assert dice_loss(m, m).item() == pytest.approx(0.0, abs=1e-12)
        assert dice_loss(1.0 - m, m).item() == pytest.approx(1.0, abs=1e-12)
    c = rng.random((4, 4))
    assert dice_loss(c, c).item() == pytest.approx(0.0, abs=1e-12)
    assert dice_loss(np.zeros((3, 3)), np.zeros((3, 3))).item() == 0.0


@given(seed=st.integers(0, 2**32 - 1))
@settings(max_examples=40, deadline=None)
def test_loss_ranges(seed):
    rng = np.random.default_rng(seed)
    p, g = rng.random((5, 5)), random_binary(rng, (5, 5))
    assert 0.0 <= dice_loss(p, g).item() <= 1.0
    assert bce_loss(p, g).item() >= 0.0


def test_shape_mismatch_raises():
    with pytest.raises(DimensionError):
        bce_loss(np.zeros((2, 2)), np.zeros((2, 3)))
    with pytest.raises(DimensionError):
        dice_loss(np.zeros((2, 2)), np.zeros(4))
    with pytest.raises(DimensionError):
        prompt_loss(np.zeros((2, 2)), np.zeros((3, 2)))


# -- guide / prompt ------------------------------------------------------------

def test_guide_loss_averages_steps():
    rng = np.random.default_rng(4)
    g = random_binary(rng, (6, 6))
    a, b = rng.random((6, 6)), rng.random((6, 6))
    expected = 0.5 * (bce_oracle(a, g) + dice_oracle(a, g) + bce_oracle(b, g) + dice_oracle(b, g))
    assert guide_loss([a, b], g).item() == pytest.approx(expected, abs=1e-12)
    single = bce_oracle(a, g) + dice_oracle(a, g)
    assert guide_loss([a], g).item() == pytest.approx(single, abs=1e-12)


def test_guide_loss_at_gt_is_near_zero():
    g = random_binary(np.random.default_rng(5), (6, 6))
    assert guide_loss([g, g], g).item() < 1e-6


def test_guide_loss_empty_raises():
    with pytest.raises(ContractError):
        guide_loss([], np.ones((2, 2)))


def test_prompt_loss_is_bce_plus_dice():
    rng = np.random.default_rng(6)
    p, g = rng.random((7, 7)), random_binary(rng, (7, 7))
    assert prompt_loss(p, g).item() == pytest.approx(bce_loss(p, g).item() + dice_loss(p, g).item(), abs=1e-14)
    half = np.zeros((4, 4))
    half[:2] = 1.0
    # 0.5 everywhere against a half-foreground mask
    assert prompt_loss(np.full((4, 4), 0.5), half).item() == pytest.approx(
        math.log(2) + 1 - 2 * 4.0 / (8.0 + 4.0), abs=1e-12
    )


# -- orthogonal ----------------------------------------------------------------

def test_pairwise_cosine_matches_loop_oracle():
    rng = np.random.default_rng(7)
    for _ in range(20):
        maps = rng.random((4, 3, 5))
        assert pairwise_cosine_offdiag(maps).item() == pytest.approx(cos_loop_oracle(maps), abs=1e-9)


def test_ortho_disjoint_maps_is_zero():
    maps = np.zeros((3, 2, 3))
    maps[0, 0, :] = 1 / 3
    maps[1, 1, :2] = 0.5
    maps[2, 1, 2] = 1.0
    assert ortho_loss([maps], [maps]).item() == 0.0


def test_ortho_identical_pair_is_four():
    a = np.random.default_rng(8).random((1, 4, 4))
    maps = np.concatenate([a, a])
    assert ortho_loss([maps], [maps]).item() == pytest.approx(4.0, abs=1e-12)


def test_ortho_averages_over_steps_and_sums_sides():
    rng = np.random.default_rng(9)
    s = [rng.random((3, 4, 4)) for _ in range(2)]
    q = [rng.random((3, 4, 4)) for _ in range(2)]
    expected = sum(cos_loop_oracle(a) + cos_loop_oracle(b) for a, b in zip(s, q)) / 2
    assert ortho_loss(s, q).item() == pytest.approx(expected, abs=1e-9)


def test_ortho_nonnegative_and_errors():
    rng = np.random.default_rng(10)
    assert ortho_loss([rng.random((3, 2, 2))], [rng.random((3, 2, 2))]).item() >= 0
    z = np.zeros((2, 2, 2))
    z[0, 0, 0] = 1.0
    with pytest.raises(DegenerateInputError):
        pairwise_cosine_offdiag(z)
    with pytest.raises(ContractError):
        ortho_loss([], [])


# -- total ---------------------------------------------------------------------

def test_total_loss_defaults_and_zero_lambdas():
    assert total_loss(1.0, 2.0, 3.0).item() == pytest.approx(1.0 + 0.05 * 3.0 + 0.5 * 2.0)
    zero = LossConfig(lambda_ortho=0.0, lambda_guide=0.0)
    assert total_loss(1.25, 7.0, 9.0, zero).item() == 1.25


def test_total_loss_is_linear_in_each_lambda():
    p, g, o = 0.7, 1.3, 4.1
    f = lambda lo, lg: total_loss(p, g, o, LossConfig(lambda_ortho=lo, lambda_guide=lg)).item()
    assert (f(0.2, 0.5) - f(0.1, 0.5)) / 0.1 == pytest.approx(o)
    assert (f(0.05, 0.9) - f(0.05, 0.4)) / 0.5 == pytest.approx(g)


@pytest.mark.parametrize("kwargs", [{"lambda_ortho": -1.0}, {"lambda_guide": -0.1}, {"eps": 0.0}, {"eps": 0.5}])
def test_loss_config_validation(kwargs):
    with pytest.raises(ContractError):
        LossConfig(**kwargs)


def test_loss_gradients_pass_finite_differences():
    rng = np.random.default_rng(11)
    g = random_binary(rng, (4, 4))
    p = Tensor(rng.uniform(0.1, 0.9, (4, 4)), requires_grad=True)
    maps = Tensor(rng.random((3, 4, 4)) + 0.05, requires_grad=True)
    assert grad_check(lambda: prompt_loss(p, g), [p]).passed
    assert grad_check(lambda: guide_loss([p, p * 0.5], g), [p]).passed
    assert grad_check(lambda: ortho_loss([maps], [maps * 2.0]), [maps]).passed
