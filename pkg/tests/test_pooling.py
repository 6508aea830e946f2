import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from camwords.errors import ConfigError, ParameterError, ShapeError
from camwords.pooling import (
    PoolConfig,
    branch_pool,
    gap,
    gmp,
    gwrp,
    hybrid_pool,
    local_max_pool,
    lse,
    pool,
)

from .oracles import branch_oracle, gap_oracle, grid_max_oracle, gwrp_oracle, hybrid_oracle, lse_oracle


def fmap(h, w, d, seed=0):
    return torch.from_numpy(np.random.default_rng(seed).normal(size=(h, w, d)))


def test_gap_constant_and_small_map():
    assert torch.allclose(gap(torch.full((4, 4, 3), 2.5)), torch.full((3,), 2.5))
    F = torch.tensor([[1.0, 2.0], [3.0, 4.0]]).reshape(2, 2, 1)
    assert gap(F).item() == 2.5


def test_gap_linearity():
    F, G = fmap(4, 4, 3, 1), fmap(4, 4, 3, 2)
    torch.testing.assert_close(gap(2 * F - 3 * G), 2 * gap(F) - 3 * gap(G))


def test_local_max_r1_is_gmp_and_r_full_is_identity():
    F = fmap(8, 8, 3)
    assert torch.equal(local_max_pool(F, 1)[0, 0], F.amax(dim=(0, 1)))
    assert torch.equal(local_max_pool(F, 8), F)


def test_local_max_non_divisible():
    with pytest.raises(ShapeError, match="r=3.*h=8.*w=8"):
        local_max_pool(fmap(8, 8, 2), 3)


@pytest.mark.parametrize("seed", range(10))
def test_local_max_matches_loop_oracle(seed):
    F = fmap(8, 8, 3, seed)
    assert np.array_equal(local_max_pool(F, 2).numpy(), grid_max_oracle(F.numpy(), 2))


def test_branch_r1_equals_gmp_and_constant():
    F = fmap(8, 8, 4)
    assert torch.equal(branch_pool(F, 1), gmp(F))
    for r in (1, 2, 4):
        torch.testing.assert_close(branch_pool(torch.full((8, 8, 2), -1.5), r), torch.full((2,), -1.5))


@pytest.mark.parametrize("seed", range(10))
def test_branch_matches_two_stage_oracle(seed):
    F = fmap(8, 8, 2, seed)
    np.testing.assert_allclose(branch_pool(F, 4).numpy(), branch_oracle(F.numpy(), 4), atol=1e-6)


def test_hybrid_constant_map():
    torch.testing.assert_close(hybrid_pool(torch.full((8, 8, 3), 0.7, dtype=torch.float64)),
                               torch.full((3,), 0.7, dtype=torch.float64))


def test_hybrid_default_divisor_is_gamma_plus_three():
    F = fmap(8, 8, 3)
    manual = (branch_pool(F, 1) + branch_pool(F, 2) + branch_pool(F, 4) + 2 * gap(F)) / 5
    torch.testing.assert_close(hybrid_pool(F), manual)


def test_hybrid_limits():
    F = fmap(8, 8, 5, 3)
    assert float((hybrid_pool(F, PoolConfig(gamma=1e6)) - gap(F)).abs().max()) < 1e-3
    maxes = (branch_pool(F, 1) + branch_pool(F, 2) + branch_pool(F, 4)) / 3
    torch.testing.assert_close(hybrid_pool(F, PoolConfig(gamma=0.0)), maxes)


@pytest.mark.parametrize("seed", range(10))
def test_hybrid_matches_oracle(seed):
    F = fmap(8, 8, 3, seed)
    np.testing.assert_allclose(hybrid_pool(F).numpy(), hybrid_oracle(F.numpy(), (1, 2, 4), 2.0), atol=1e-6)


def test_hybrid_rejects_bad_config():
    with pytest.raises(ConfigError):
        hybrid_pool(fmap(8, 8, 2), PoolConfig(split_sizes=(2, 4)))
    with pytest.raises(ConfigError):
        hybrid_pool(fmap(6, 6, 2), PoolConfig(split_sizes=(1, 4)))
    with pytest.raises(ConfigError):
        hybrid_pool(fmap(8, 8, 2), PoolConfig(gamma=-1))


def test_gwrp_lse_limits_and_constants():
    # the GWRP-to-GAP gap grows with pixel count; 4x4 maps as in the oracle instances
    F = fmap(4, 4, 4)
    assert float((gwrp(F, 0.999) - gap(F)).abs().max()) < 1e-2
    assert float((lse(F, 1e3) - gmp(F)).abs().max()) < 1e-2
    const = torch.full((4, 4, 2), 3.0, dtype=torch.float64)
    torch.testing.assert_close(gwrp(const), torch.full((2,), 3.0, dtype=torch.float64))
    torch.testing.assert_close(lse(const), torch.full((2,), 3.0, dtype=torch.float64))


@pytest.mark.parametrize("seed", range(10))
def test_gwrp_lse_match_oracles(seed):
    F = fmap(4, 4, 1, seed)
    np.testing.assert_allclose(gwrp(F, 0.9).numpy(), gwrp_oracle(F.numpy(), 0.9), atol=1e-6)
    np.testing.assert_allclose(lse(F, 5.0).numpy(), lse_oracle(F.numpy(), 5.0), atol=1e-6)


@pytest.mark.parametrize("bad", [0.0, 1.0, 1.2])
def test_gwrp_decay_range(bad):
    with pytest.raises(ParameterError):
        gwrp(fmap(4, 4, 1), bad)


def test_lse_sharpness_range():
    with pytest.raises(ParameterError):
        lse(fmap(4, 4, 1), 0.0)


def test_pool_dispatch_and_batch_axes():
    F = torch.from_numpy(np.random.default_rng(0).normal(size=(3, 8, 8, 4)))
    for name in ("gap", "gmp", "lse", "gwrp", "hp"):
        out = pool(F, name)
        assert out.shape == (3, 4)
        torch.testing.assert_close(out[1], pool(F[1], name))
    with pytest.raises(ConfigError):
        pool(F, "median")


ALL = {
    "gap": gap,
    "gmp": gmp,
    "branch2": lambda F: branch_pool(F, 2),
    "hp": hybrid_pool,
    "gwrp": gwrp,
    "lse": lse,
}


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10_000), gamma=st.floats(0.0, 10.0))
def test_order_sandwich(seed, gamma):
    F = fmap(8, 8, 3, seed)
    branches = torch.stack([branch_pool(F, r) for r in (1, 2, 4)] + [gap(F)])
    hp = hybrid_pool(F, PoolConfig(gamma=gamma))
    assert bool((branches.min(0).values - 1e-12 <= hp).all() and (hp <= branches.max(0).values + 1e-12).all())
    for r in (1, 2, 4):
        assert bool((branch_pool(F, 1) >= branch_pool(F, r) - 1e-12).all())
        assert bool((branch_pool(F, r) >= gap(F) - 1e-12).all())


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), c=st.floats(-5, 5))
def test_translation_shifts_every_pool(seed, c):
    F = fmap(8, 8, 2, seed)
    for name, op in ALL.items():
        torch.testing.assert_close(op(F + c), op(F) + c, atol=1e-9, rtol=0, msg=name)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), a=st.floats(0.01, 50))
def test_positive_scaling(seed, a):
    F = fmap(8, 8, 2, seed)
    for name, op in ALL.items():
        if name == "lse":
            continue
        torch.testing.assert_close(op(a * F), a * op(F), atol=1e-9, rtol=1e-9, msg=name)


@pytest.mark.parametrize("seed", range(20))
def test_hybrid_gradient_finite_difference(seed):
    F = fmap(8, 8, 3, seed).requires_grad_(True)
    weights = torch.from_numpy(np.random.default_rng(seed + 7).normal(size=3))
    assert torch.autograd.gradcheck(lambda x: (hybrid_pool(x) * weights).sum(), (F,), eps=1e-6, atol=1e-8,
                                    rtol=1e-4)


@pytest.mark.parametrize("seed", range(20))
@pytest.mark.parametrize("op", [gwrp, lse, gap])
def test_baseline_gradients(seed, op):
    F = fmap(4, 4, 2, seed).requires_grad_(True)
    assert torch.autograd.gradcheck(lambda x: op(x).sum(), (F,), eps=1e-6, atol=1e-8, rtol=1e-4)


def test_max_tie_gradient_goes_to_lowest_index():
    F = torch.zeros(4, 4, 1, requires_grad=True)
    branch_pool(F, 1).sum().backward()
    grad = F.grad[..., 0]
    assert grad[0, 0] == 1.0 and grad.sum() == 1.0
