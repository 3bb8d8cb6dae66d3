import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from skipalign.rope import (
    RopeConfigError,
    RopeParams,
    apply_rope,
    attention_scores,
    rope_angles,
    rope_rotate,
)


def test_frequencies():
    f = RopeParams(head_dim=8, theta_base=10000.0).frequencies()
    assert f[0] == 1.0
    np.testing.assert_allclose(f, [10000 ** (-2 * t / 8) for t in range(4)])
    g = RopeParams(head_dim=8, theta_base=10000.0, scale=4.0).frequencies()
    assert np.all(g[1:] < f[1:])


def test_bad_params():
    with pytest.raises(RopeConfigError):
        RopeParams(head_dim=7)
    with pytest.raises(RopeConfigError):
        RopeParams(theta_base=0)
    with pytest.raises(RopeConfigError):
        rope_rotate(np.zeros(4), 0, RopeParams(head_dim=8))


def test_rotation_preserves_norm_and_zero_is_identity():
    params = RopeParams(head_dim=16)
    v = np.random.default_rng(0).normal(size=16)
    np.testing.assert_array_equal(rope_rotate(v, 0, params), v)
    assert np.linalg.norm(rope_rotate(v, 12345, params)) == pytest.approx(np.linalg.norm(v))


def test_torch_matches_numpy():
    params = RopeParams(head_dim=8)
    rng = np.random.default_rng(1)
    x = rng.normal(size=(5, 8))
    pos = np.array([0, 3, 9, 400, 99_999])
    cos, sin = rope_angles(torch.tensor(pos), params, dtype=torch.float64)
    got = apply_rope(torch.tensor(x), cos, sin).numpy()
    want = np.stack([rope_rotate(x[i], int(pos[i]), params) for i in range(5)])
    np.testing.assert_allclose(got, want, atol=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 100_000), st.integers(0, 100_000), st.integers(-5000, 5000), st.integers(0, 2**31))
def test_scores_depend_on_offset_only(m, n, c, seed):
    params = RopeParams(head_dim=32)
    rng = np.random.default_rng(seed)
    q, k = rng.normal(size=32), rng.normal(size=32)
    c = max(c, -min(m, n))
    a = rope_rotate(q, m, params) @ rope_rotate(k, n, params)
    b = rope_rotate(q, m + c, params) @ rope_rotate(k, n + c, params)
    assert abs(a - b) <= 1e-9 * max(1.0, abs(a))


def test_attention_scores_causal_and_shift_invariant():
    params = RopeParams(head_dim=8)
    g = torch.Generator().manual_seed(0)
    q = torch.randn(2, 6, 8, generator=g, dtype=torch.float64)
    k = torch.randn(2, 6, 8, generator=g, dtype=torch.float64)
    pos = torch.tensor([[0, 1, 2, 50, 51, 90]] * 2)
    s1 = attention_scores(q, k, pos, params)
    s2 = attention_scores(q, k, pos + 777, params)
    assert torch.isinf(s1[0, 0, 1]) and s1[0, 0, 1] < 0
    tri = torch.ones(6, 6, dtype=torch.bool).tril()
    torch.testing.assert_close(s1[:, tri], s2[:, tri], atol=1e-10, rtol=0)


def test_attention_scores_match_manual_dot():
    params = RopeParams(head_dim=4)
    q = torch.tensor([[[1.0, 0.5, -0.2, 0.3], [0.1, 0.2, 0.3, 0.4]]], dtype=torch.float64)
    k = torch.tensor([[[0.3, -1.0, 0.7, 0.2], [0.5, 0.5, 0.5, 0.5]]], dtype=torch.float64)
    pos = torch.tensor([[4, 1000]])
    s = attention_scores(q, k, pos, params)
    want = rope_rotate(q[0, 1].numpy(), 1000, params) @ rope_rotate(k[0, 0].numpy(), 4, params) / math.sqrt(4)
    assert float(s[0, 1, 0]) == pytest.approx(want, abs=1e-12)


def test_heads_axis_broadcast():
    params = RopeParams(head_dim=4)
    q = torch.randn(1, 3, 5, 4, dtype=torch.float64)
    pos = torch.tensor([[0, 2, 5, 9, 20]])
    s = attention_scores(q, q, pos, params)
    assert s.shape == (1, 3, 5, 5)
    for h in range(3):
        torch.testing.assert_close(s[:, h], attention_scores(q[:, h], q[:, h], pos, params))


def test_rejects_non_increasing_positions():
    params = RopeParams(head_dim=4)
    q = torch.zeros(1, 3, 4)
    with pytest.raises(ValueError):
        attention_scores(q, q, torch.tensor([[0, 5, 5]]), params)
