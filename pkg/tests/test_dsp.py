import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from rowmix import dsp
from rowmix.dsp import (DspOperands, DspProduct, dsp48_mac, operand_fields, pack3, pack4, packed_dot_w8,
                        packed_gemm, unpack3, unpack4)
from rowmix.quant import QuantizedMatrix

from oracles import naive_int_gemm

w4 = st.integers(-8, 7)
u4 = st.integers(0, 15)
a6 = st.integers(-32, 31)


def run3(w, a, signedness=dsp.SIGNED):
    return unpack3(dsp48_mac(pack3(w, a, signedness)))


def run4(w, a, signedness=dsp.SIGNED):
    return unpack4(dsp48_mac(pack4(w, a, signedness)))


def test_operand_ranges():
    DspOperands(2 ** 26 - 1, -(2 ** 26), 2 ** 17 - 1)
    with pytest.raises(ValueError):
        DspOperands(2 ** 26, 0, 0)
    with pytest.raises(ValueError):
        DspOperands(0, 0, 2 ** 17)
    with pytest.raises(ValueError):
        DspProduct(2 ** 44)


def test_mac_examples():
    assert int(dsp48_mac(DspOperands(0, 0, 0))) == 0
    assert int(dsp48_mac(DspOperands(0, 5, 3))) == 15
    assert int(dsp48_mac(DspOperands(1, 2, -4))) == -12


def test_mac_wraps_pre_adder_and_product():
    # pre-adder overflows 27 bits and wraps to the negative end
    ops = DspOperands(2 ** 26 - 1, 1, 1)
    assert int(dsp48_mac(ops)) == -(2 ** 26)
    big = DspOperands(2 ** 26 - 1, 0, 2 ** 17 - 1)
    exact = (2 ** 26 - 1) * (2 ** 17 - 1)
    assert int(dsp48_mac(big)) == exact  # fits in 45 bits
    assert dsp.wrap(2 ** 44, 45) == -(2 ** 44)


def test_pack3_examples():
    assert pack3([0, 0, 0], 17).d == 0
    assert run3([3, -2, 7], 5) == [15, -10, 35]
    assert run3([-8, -8, -8], -32) == [256, 256, 256]
    assert run3([7, 7, 7], 31) == [217, 217, 217]
    assert unpack3(0) == [0, 0, 0]


def test_pack4_examples():
    assert run4([3, -2], [5, -3]) == [[15, -10], [-9, 6]]
    assert run4([5, -7], [0, 0]) == [[0, 0], [0, 0]]
    assert run4([-8, 7], [-32, 31]) == [[256, -224], [-248, 217]]


def test_pack_range_errors():
    with pytest.raises(ValueError):
        pack3([8, 0, 0], 1)
    with pytest.raises(ValueError):
        pack3([0, 0, 0], 32)
    with pytest.raises(ValueError):
        pack3([-1, 0, 0], 1, dsp.UNSIGNED)
    with pytest.raises(ValueError):
        pack4([0, 0], [0, -33])
    with pytest.raises(ValueError):
        pack3([0, 0], 1)


def test_zero_lane_forwards_borrow():
    # the middle product is zero; the bottom lane's borrow must reach the top lane
    assert run3([-8, 0, -8], 1) == [-8, 0, -8]


@given(st.lists(w4, min_size=3, max_size=3), a6)
def test_pack3_property(w, a):
    assert run3(w, a) == [x * a for x in w]


@given(st.lists(u4, min_size=3, max_size=3), a6)
def test_pack3_unsigned_property(w, a):
    assert run3(w, a, dsp.UNSIGNED) == [x * a for x in w]


@given(st.lists(w4, min_size=2, max_size=2), st.lists(a6, min_size=2, max_size=2))
def test_pack4_property(w, a):
    assert run4(w, a) == [[a[0] * w[0], a[0] * w[1]], [a[1] * w[0], a[1] * w[1]]]


@given(st.lists(u4, min_size=3, max_size=3))
def test_unsigned_operands_have_no_borrow(w):
    # unsigned nibbles land in their fields verbatim: no lane borrows from its neighbour
    d = pack3(w, 1, dsp.UNSIGNED).d
    assert operand_fields(d) == list(w)


def test_signed_operands_do_borrow():
    # a negative bottom nibble sign-extends through the fields above it
    d = pack3([-1, 0, 0], 1).d
    assert d == -1
    assert operand_fields(d) == [0x7FF, 0x7FF, 0x7FF]


def test_packed_dot_w8_examples():
    assert packed_dot_w8([-3], [-77]) == 231
    assert packed_dot_w8([0, 0], [0, 0]) == 0
    assert packed_dot_w8([1, 2, 3], [100, -100, 50]) == 50
    assert packed_dot_w8([1, 2, 3], [100, -100, 50], factor=4) == 50
    with pytest.raises(ValueError):
        packed_dot_w8([1, 2], [3])


def test_packed_dot_w8_exhaustive_single_element():
    for w in range(-128, 128):
        for a in range(-32, 32):
            assert packed_dot_w8([a], [w]) == a * w


def test_sweeps_are_clean():
    assert dsp.sweep_w8().ok and dsp.sweep_w8().cases == 16384
    r3 = dsp.sweep_pack3(True)
    assert r3.ok and r3.cases == 262144
    u3 = dsp.sweep_pack3(False)
    assert u3.ok and u3.cases == 262144


def test_sweep_catches_bad_layout():
    r = dsp.sweep_pack3(True, d_offsets=(0, 10, 21))
    assert not r.ok and r.first_failure is not None


def test_lane_layout_validation():
    with pytest.raises(ValueError):
        dsp.LaneLayout((0, 9, 18))
    with pytest.raises(ValueError):
        dsp.LaneLayout((0, 20, 40))
    with pytest.raises(ValueError):
        dsp.LaneLayout((11, 0))


def _qm(codes, bits):
    return QuantizedMatrix(np.asarray(codes, np.int8), bits, np.ones(len(bits)))


@pytest.mark.parametrize("factor", [3, 4])
def test_packed_gemm_examples(factor, rng):
    eye = _qm(np.eye(4), [4] * 4)
    act = rng.integers(-32, 32, size=(4, 3))
    np.testing.assert_array_equal(packed_gemm(eye, act, factor), act)
    w = rng.integers(-8, 8, size=(4, 4))
    a = rng.integers(-32, 32, size=(4, 2))
    np.testing.assert_array_equal(packed_gemm(_qm(w, [4] * 4), a, factor), naive_int_gemm(w, a))
    w = np.vstack([rng.integers(-128, 128, size=(2, 4)), rng.integers(-8, 8, size=(2, 4))])
    np.testing.assert_array_equal(packed_gemm(_qm(w, [8, 8, 4, 4]), a, factor), naive_int_gemm(w, a))


def test_packed_gemm_errors(rng):
    q = _qm(np.zeros((2, 3)), [4, 4])
    with pytest.raises(ValueError):
        packed_gemm(q, np.zeros((4, 2), int))
    with pytest.raises(ValueError):
        packed_gemm(q, np.full((3, 2), 40))
    with pytest.raises(ValueError):
        packed_gemm(q, np.zeros((3, 2), int), factor=5)


@st.composite
def gemm_case(draw):
    rows, cols, nf = draw(st.integers(1, 9)), draw(st.integers(1, 9)), draw(st.integers(1, 5))
    bits = draw(st.lists(st.sampled_from([4, 8]), min_size=rows, max_size=rows))
    seed = draw(st.integers(0, 2 ** 32 - 1))
    r = np.random.default_rng(seed)
    codes = np.stack([r.integers(-(1 << (b - 1)), 1 << (b - 1), size=cols) for b in bits])
    act = r.integers(-32, 32, size=(cols, nf))
    return codes, bits, act


@given(gemm_case(), st.sampled_from([3, 4]), st.sampled_from(["numba", "numpy"]))
def test_packed_gemm_property(case, factor, impl):
    codes, bits, act = case
    np.testing.assert_array_equal(packed_gemm(_qm(codes, bits), act, factor, impl=impl),
                                  naive_int_gemm(codes, act))
