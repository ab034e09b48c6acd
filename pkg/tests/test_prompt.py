import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import central_diff, random_features, rel_err
from ntprompt.backbone import DTYPE, MultiScaleFeatures
from ntprompt.errors import ConfigError, DegenerateBatchError
from ntprompt.prompt import IPProjector, assemble_prompts, style_statistics

DIMS = (4, 6)
D_T = 4


def _ms(per_layer):
    per_layer = [torch.as_tensor(np.asarray(p), dtype=DTYPE) for p in per_layer]
    return MultiScaleFeatures(per_layer, torch.zeros(per_layer[0].shape[0], 3, dtype=DTYPE))


def test_constant_features_give_mean_k_and_zero_sigma():
    stats = style_statistics(_ms([np.full((5, 4), 2.5), np.full((5, 6), -1.0)]))
    np.testing.assert_array_equal(stats.numpy(), [2.5] * 4 + [0.0] * 4 + [-1.0] * 6 + [0.0] * 6)


def test_two_point_population_std():
    stats = style_statistics(_ms([[[0.0, 0.0], [2.0, 0.0]], [[1.0], [1.0]]]))
    assert stats[0] == 1.0 and stats[2] == 1.0  # mu, sigma of the {0, 2} channel


def test_batch_of_one_is_degenerate():
    with pytest.raises(DegenerateBatchError):
        style_statistics(_ms([np.ones((1, 4)), np.ones((1, 6))]))


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_statistics_match_two_pass_oracle(seed):
    rng = np.random.default_rng(seed)
    layers = [rng.normal(size=(8, c)) * rng.uniform(0.1, 10) for c in DIMS]
    expected = []
    for x in layers:
        b, c = x.shape
        mu = [sum(x[i, j] for i in range(b)) / b for j in range(c)]
        var = [sum((x[i, j] - mu[j]) ** 2 for i in range(b)) / b for j in range(c)]
        expected += mu + [v**0.5 for v in var]
    np.testing.assert_allclose(style_statistics(_ms(layers)).numpy(), expected, rtol=0, atol=1e-10)


def test_zero_stats_give_zero_token():
    proj = IPProjector(DIMS, D_T, seed=0)
    token = proj.domain_token(torch.zeros(2 * sum(DIMS), dtype=DTYPE))
    assert torch.equal(token, torch.zeros(D_T, dtype=DTYPE))


def test_identical_stats_identical_tokens():
    proj = IPProjector(DIMS, D_T, seed=1)
    ms = random_features(DIMS, 8, 3, seed=2)
    copy = MultiScaleFeatures([p.clone() for p in ms.per_layer], ms.final.clone())
    assert torch.equal(proj.domain_token(style_statistics(ms)), proj.domain_token(style_statistics(copy)))


def test_domain_token_dimension_mismatch():
    proj = IPProjector(DIMS, D_T)
    with pytest.raises(ConfigError):
        proj.domain_token(torch.zeros(3, dtype=DTYPE))


@pytest.mark.parametrize("pooled", [True, False])
def test_token_count_is_number_of_taps(pooled):
    proj = IPProjector(DIMS, D_T, pooled=pooled)
    for b in (2, 5):
        V = proj.image_tokens(random_features(DIMS, b, 3))
        assert V.shape == ((len(DIMS), D_T) if pooled else (b, len(DIMS), D_T))


def test_identical_batches_identical_image_tokens():
    proj = IPProjector(DIMS, D_T, seed=2)
    a = random_features(DIMS, 6, 3, seed=7)
    b = random_features(DIMS, 6, 3, seed=7)
    assert torch.equal(proj.image_tokens(a), proj.image_tokens(b))


def test_image_tokens_dimension_mismatch():
    proj = IPProjector(DIMS, D_T)
    with pytest.raises(ConfigError):
        proj.image_tokens(random_features((4, 5), 3, 3))
    with pytest.raises(ConfigError):
        proj.image_tokens(random_features((4, 6, 8), 3, 3))


def test_calibration_standardises_reference():
    ms = random_features(DIMS, 200, 3, seed=4)
    proj = IPProjector(DIMS, D_T, squash=None)
    proj.calibrate(ms, batch_size=16, n_batches=32)
    z = (ms.per_layer[1] - proj.content_shift_1) / proj.content_scale_1
    np.testing.assert_allclose(z.mean(0).numpy(), 0.0, atol=1e-10)
    np.testing.assert_allclose(z.std(0, unbiased=False).numpy(), 1.0, atol=1e-4)


def _grad_check(fn, proj):
    for name, p in proj.named_parameters():
        proj.zero_grad()
        fn().backward()
        analytic = torch.zeros_like(p) if p.grad is None else p.grad.clone()
        with torch.no_grad():
            numeric = central_diff(fn, p)
        assert rel_err(analytic.numpy(), numeric.numpy()) < 1e-4, name


@pytest.mark.parametrize("squash", [None, 3.0])
def test_projector_gradients_match_central_differences(squash):
    ms = random_features(DIMS, 6, 3, seed=5)
    proj = IPProjector(DIMS, D_T, seed=3, init_scale=1.0, squash=squash)
    proj.calibrate(random_features(DIMS, 40, 3, seed=6), batch_size=6, n_batches=8)
    w = torch.randn(D_T, generator=torch.Generator().manual_seed(0), dtype=DTYPE)
    stats = style_statistics(ms)
    _grad_check(lambda: (proj.domain_token(stats) * w).sum(), proj)
    _grad_check(lambda: (proj.image_tokens(ms) ** 2 * w).sum(), proj)


def test_single_class_prompt_shape():
    T, V, cls = torch.zeros(D_T), torch.ones(3, D_T), torch.full((1, D_T), 2.0)
    P = assemble_prompts(T, V, cls)
    assert P.shape == (1, 3 + 2, D_T)
    assert torch.equal(P[0, 0], T) and torch.equal(P[0, 1:4], V) and torch.equal(P[0, -1], cls[0])


def test_swapping_domain_token_changes_only_row_zero():
    gen = torch.Generator().manual_seed(0)
    T_a, T_u = torch.randn(D_T, generator=gen), torch.randn(D_T, generator=gen)
    V, cls = torch.randn(2, D_T, generator=gen), torch.randn(4, D_T, generator=gen)
    pa, pu = assemble_prompts(T_a, V, cls), assemble_prompts(T_u, V, cls)
    assert not torch.equal(pa[:, 0], pu[:, 0])
    assert torch.equal(pa[:, 1:], pu[:, 1:])


@pytest.mark.parametrize("per_sample", [False, True])
def test_class_prompts_differ_only_in_last_row(per_sample):
    gen = torch.Generator().manual_seed(1)
    T, cls = torch.randn(D_T, generator=gen), torch.randn(3, D_T, generator=gen)
    V = torch.randn(*((5,) if per_sample else ()), 2, D_T, generator=gen)
    P = assemble_prompts(T, V, cls)
    P = P if per_sample else P[None]
    for i in range(3):
        for j in range(3):
            assert torch.equal(P[:, i, :-1], P[:, j, :-1])
            if i != j:
                assert not torch.equal(P[:, i, -1], P[:, j, -1])


def test_assemble_shape_errors():
    with pytest.raises(ConfigError):
        assemble_prompts(torch.zeros(D_T + 1), torch.zeros(2, D_T), torch.zeros(3, D_T))
    with pytest.raises(ConfigError):
        assemble_prompts(torch.zeros(D_T), torch.zeros(2, D_T + 1), torch.zeros(3, D_T))
