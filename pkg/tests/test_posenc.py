import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pelab.errors import ConfigError
from pelab.posenc import (
    KerpleParams,
    PEKind,
    ape_table,
    apply_ape,
    attach,
    kerple_bias,
    rope_rotate,
)
from pelab.tensor import Tensor, backward, finite_diff_check, tsum


def formula_ape(d_model, length):
    """Independent closed-form evaluation, scalar loop."""
    out = np.zeros((d_model, length))
    for d in range(1, d_model + 1):
        for i in range(length):
            if d % 2 == 0:
                out[d - 1, i] = np.sin(5000.0 ** (-d / d_model) * i)
            else:
                out[d - 1, i] = np.cos(5000.0 ** (-(d - 1) / d_model) * i)
    return out


# ------------------------------------------------------------------ APE


def test_ape_position_zero():
    tab = ape_table(6, 1)
    np.testing.assert_array_equal(tab[1::2, 0], np.zeros(3))  # even d -> sin 0
    np.testing.assert_array_equal(tab[0::2, 0], np.ones(3))   # odd d -> cos 0


def test_ape_d4_spot_values():
    tab = ape_table(4, 2)
    expect = [
        np.cos(1.0),                      # d=1 (odd): cos(5000^0 * 1)
        np.sin(5000.0 ** -0.5),           # d=2: sin(5000^{-1/2})
        np.cos(5000.0 ** -0.5),           # d=3: cos(5000^{-1/2})
        np.sin(5000.0 ** -1.0),           # d=4: sin(1/5000)
    ]
    np.testing.assert_allclose(tab[:, 1], expect, atol=1e-12)
    np.testing.assert_allclose(
        tab[:, 1], [0.540302, 0.014142, 0.999900, 0.000200], atol=1e-6)


def test_ape_matches_formula_everywhere():
    tab = ape_table(8, 16)
    np.testing.assert_allclose(tab, formula_ape(8, 16), atol=1e-12)


def test_ape_range():
    tab = ape_table(12, 50)
    assert tab.min() >= -1.0 and tab.max() <= 1.0


def test_ape_prefix_consistency():
    full = ape_table(8, 32)
    np.testing.assert_array_equal(ape_table(8, 16), full[:, :16])


def test_apply_ape_zero_input_is_table_sum():
    d, t, f = 4, 3, 5
    out = apply_ape(Tensor(np.zeros((d, t, f)))).data
    pt, pf = ape_table(d, t), ape_table(d, f)
    expect = pt[:, :, None] + pf[:, None, :]
    np.testing.assert_allclose(out, expect, atol=1e-12)


def test_apply_ape_single_position():
    d = 6
    out = apply_ape(Tensor(np.zeros((d, 1, 1)))).data.ravel()
    expect = np.where(np.arange(1, d + 1) % 2 == 0, 0.0, 2.0)  # sin0*2 / cos0*2
    np.testing.assert_allclose(out, expect, atol=1e-12)


def test_apply_ape_spot_value():
    d = 4
    out = apply_ape(Tensor(np.zeros((d, 2, 1)))).data
    tab = ape_table(d, 2)
    np.testing.assert_allclose(out[:, 1, 0], tab[:, 1] + tab[:, 0], atol=1e-12)


# ------------------------------------------------------------------ KERPLE


def test_kerple_zero_diagonal():
    b = kerple_bias(5, KerpleParams.init(2)).data
    np.testing.assert_array_equal(np.diagonal(b, axis1=1, axis2=2), np.zeros((2, 5)))


def test_kerple_unit_params_ln2():
    b = kerple_bias(4, KerpleParams.init(1, r1=1.0, r2=1.0)).data[0]
    assert abs(b[0, 1] + np.log(2.0)) < 1e-12


def test_kerple_r2_r3_case():
    b = kerple_bias(3, KerpleParams.init(1, r1=2.0, r2=3.0)).data[0]
    assert abs(b[1, 2] + 2.0 * np.log(4.0)) < 1e-12


@given(st.floats(0.1, 5.0), st.floats(0.1, 5.0), st.integers(3, 12))
@settings(max_examples=30, deadline=None)
def test_kerple_matrix_properties(r1, r2, length):
    b = kerple_bias(length, KerpleParams.init(1, r1=r1, r2=r2)).data[0]
    np.testing.assert_allclose(b, b.T, atol=1e-12)
    assert (b <= 1e-15).all()
    first_row = b[0]
    assert (np.diff(first_row) < 0).all()  # strictly decreasing with distance


def test_kerple_subblock_consistency():
    p = KerpleParams.init(2, r1=0.7, r2=1.3)
    small = kerple_bias(6, p).data
    big = kerple_bias(12, p).data
    np.testing.assert_array_equal(small, big[:, :6, :6])


def test_kerple_gradients_flow():
    p = KerpleParams.init(2)
    err = finite_diff_check(lambda u1, u2: kerple_bias(5, KerpleParams(u1, u2)),
                            [p.u1, p.u2])
    assert err < 1e-6


# ------------------------------------------------------------------ RoPE


def test_rope_position_zero_identity():
    x = np.random.default_rng(0).normal(size=(2, 1, 6))
    out = rope_rotate(Tensor(x)).data
    np.testing.assert_allclose(out[:, 0], x[:, 0], atol=1e-15)


def test_rope_two_dim_rotation():
    length = 5
    x = np.zeros((length, 2))
    x[:, 0] = 1.0
    out = rope_rotate(Tensor(x)).data
    i = np.arange(length)
    np.testing.assert_allclose(out[:, 0], np.cos(i), atol=1e-12)
    np.testing.assert_allclose(out[:, 1], np.sin(i), atol=1e-12)


def test_rope_isometry():
    x = np.random.default_rng(1).normal(size=(3, 20, 8))
    out = rope_rotate(Tensor(x)).data
    np.testing.assert_allclose(
        np.linalg.norm(out, axis=-1), np.linalg.norm(x, axis=-1), atol=1e-12)


def test_rope_relative_shift_invariance():
    rng = np.random.default_rng(2)
    dh = 8
    q = rng.normal(size=dh)
    k = rng.normal(size=dh)
    for delta in (1, 5, 17):
        length = 40
        qs = np.zeros((length, dh))
        ks = np.zeros((length, dh))
        i, j = 3, 11
        qs[i], ks[j] = q, k
        qs[i + delta], ks[j + delta] = q, k
        rq = rope_rotate(Tensor(qs)).data
        rk = rope_rotate(Tensor(ks)).data
        a = rq[i] @ rk[j]
        b = rq[i + delta] @ rk[j + delta]
        assert abs(a - b) < 1e-10


def test_rope_length_independent_bitwise():
    x = np.random.default_rng(3).normal(size=(30, 6))
    short = rope_rotate(Tensor(x[:10])).data
    full = rope_rotate(Tensor(x)).data
    assert np.array_equal(short, full[:10])


def test_rope_odd_head_dim_rejected():
    with pytest.raises(ConfigError):
        rope_rotate(Tensor(np.zeros((4, 3))))


def test_rope_gradient():
    x = Tensor(np.random.default_rng(4).normal(size=(2, 5, 4)), requires_grad=True)
    err = finite_diff_check(rope_rotate, [x])
    assert err < 1e-6


# ------------------------------------------------------------------ attach


def test_attach_nope_all_identity():
    hooks = attach(PEKind.NOPE)
    assert hooks.input_add is None
    assert hooks.score_bias is None
    assert hooks.qk_transform is None


def test_attach_ape_only_input_hook():
    hooks = attach("ape")
    assert hooks.input_add is not None
    assert hooks.score_bias is None and hooks.qk_transform is None


def test_attach_kerple_bias_is_exactly_kerple_bias():
    p = KerpleParams.init(2, r1=1.5, r2=0.5)
    hooks = attach(PEKind.KERPLE, kerple=p)
    np.testing.assert_array_equal(hooks.score_bias(7).data, kerple_bias(7, p).data)


def test_attach_kerple_without_params():
    with pytest.raises(ConfigError):
        attach(PEKind.KERPLE)


def test_attach_rope_leaves_values_untouched():
    hooks = attach(PEKind.ROPE)
    x = np.random.default_rng(5).normal(size=(1, 6, 4))
    q, k = hooks.qk_transform(Tensor(x), Tensor(x * 2))
    assert q.shape == (1, 6, 4)
    # only q/k exist; the hook offers no value-path transform by construction
    assert not np.allclose(q.data, x)


def test_attach_unknown_kind():
    with pytest.raises(ConfigError):
        attach("alibi")
