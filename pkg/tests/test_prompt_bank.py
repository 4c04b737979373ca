import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from promptmoe import prompt_bank as pb
from promptmoe.errors import ConfigError, ShapeError


def random_bank(seed=0, n=3, t=6, r=2, h=10):
    rng = np.random.default_rng(seed)
    return pb.PromptBank(rng.normal(size=(n, t, r)), rng.normal(size=(r, h)))


def test_init_experts_identical_bitwise():
    rng = np.random.default_rng(0)
    bank = pb.init_from_embeddings(rng.normal(size=(8, 12)), n=3, r=4)
    assert bank.a.shape == (3, 8, 4)
    assert np.array_equal(bank.a[0], bank.a[1])
    assert np.array_equal(bank.a[1], bank.a[2])


def test_init_rank_one_matrix_is_exact():
    e = np.outer(np.arange(1.0, 7.0), np.arange(1.0, 5.0))
    bank = pb.init_from_embeddings(e, n=1, r=1)
    recon = bank.a[0] @ bank.b_shared
    assert np.linalg.norm(recon - e) <= 1e-10 * np.linalg.norm(e)


def test_init_full_rank_reconstructs():
    rng = np.random.default_rng(1)
    e = rng.normal(size=(6, 9))
    bank = pb.init_from_embeddings(e, n=2, r=6)
    recon = bank.a[0] @ bank.b_shared
    assert np.linalg.norm(recon - e) <= 1e-10 * np.linalg.norm(e)


def test_init_truncation_error_monotone_in_rank():
    rng = np.random.default_rng(2)
    e = rng.normal(size=(7, 11))
    errs = []
    for r in range(1, 8):
        bank = pb.init_from_embeddings(e, n=1, r=r)
        errs.append(np.linalg.norm(bank.a[0] @ bank.b_shared - e))
    assert all(errs[i + 1] <= errs[i] + 1e-12 for i in range(len(errs) - 1))


def test_init_rejects_bad_rank():
    with pytest.raises(ShapeError):
        pb.init_from_embeddings(np.ones((4, 6)), n=2, r=5)
    with pytest.raises(ConfigError):
        pb.init_from_embeddings(np.ones((4, 6)), n=0, r=2)


def test_compose_one_hot_picks_single_expert():
    bank = random_bank()
    out = pb.compose(np.array([1.0, 0.0, 0.0]), bank)
    assert np.allclose(out, bank.a[0] @ bank.b_shared, atol=1e-15)


def test_compose_zero_weights_zero_prompt():
    bank = random_bank()
    assert np.all(pb.compose(np.zeros(3), bank) == 0.0)


def test_compose_matches_naive_order():
    # weighted-sum-then-project vs project-each-then-sum
    bank = random_bank(seed=5)
    w = np.array([0.3, 0.7, -0.2])
    fused = pb.compose(w, bank)
    naive = sum(w[i] * (bank.a[i] @ bank.b_shared) for i in range(3))
    assert np.allclose(fused, naive, atol=1e-12)


def test_compose_rejects_weight_mismatch():
    with pytest.raises(ShapeError):
        pb.compose(np.ones(2), random_bank())


@settings(max_examples=25, deadline=None)
@given(
    alpha=st.floats(-2, 2),
    beta=st.floats(-2, 2),
    seed=st.integers(0, 10**6),
)
def test_compose_linear_in_weights(alpha, beta, seed):
    rng = np.random.default_rng(seed)
    bank = random_bank(seed=seed)
    u = rng.normal(size=3)
    v = rng.normal(size=3)
    lhs = pb.compose(alpha * u + beta * v, bank)
    rhs = alpha * pb.compose(u, bank) + beta * pb.compose(v, bank)
    assert np.allclose(lhs, rhs, atol=1e-12)


def test_param_count_reference_configs():
    assert pb.param_count(2, 40, 36, 2048, with_router=True) == 80_706
    assert pb.param_count(1, 40, 39, 2048, with_router=False) == 81_432
    assert pb.param_count(1, 1, 1, 1) == 2
    assert pb.format_k(80_706) == "80k"
    assert pb.format_k(81_432) == "81k"


def test_param_count_beats_undecomposed_default():
    # n*t*h for the full-size default would be 2*40*2048
    assert pb.param_count(2, 40, 36, 2048, with_router=True) < 2 * 40 * 2048


def test_bank_param_count_matches_array_sizes():
    bank = random_bank(n=2, t=5, r=3, h=7)
    assert bank.param_count() == bank.a.size + bank.b_shared.size


def test_auto_rank_inverts_reference_budget():
    assert pb.auto_rank(80_706, n=2, t=40, h=2048) == 36


def test_auto_rank_exact_rank_one_boundary():
    n, t, h = 2, 4, 8
    budget = n * h + n + (n * t + h)
    assert pb.auto_rank(budget, n, t, h) == 1
    with pytest.raises(ConfigError):
        pb.auto_rank(budget - 1, n, t, h)


def test_auto_rank_rejects_router_only_budget():
    with pytest.raises(ConfigError):
        pb.auto_rank(2 * 8 + 2, n=2, t=4, h=8)


def test_checkpoint_roundtrip(tmp_path):
    bank = random_bank(seed=9)
    path = tmp_path / "bank.npz"
    np.savez(path, **bank.to_arrays())
    with np.load(path) as arrays:
        back = pb.PromptBank.from_arrays(arrays)
    assert np.array_equal(back.a, bank.a)
    assert np.array_equal(back.b_shared, bank.b_shared)
