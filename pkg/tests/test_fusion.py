import math

import numpy as np
import pytest

from mmfusion import diffcore as dc
from mmfusion.diffcore import Tensor
from mmfusion.fusion import ClassifierHead, LabelError, MGFUnit, classify_loss, cross_entropy, mgf

from oracles import mgf_scalar


def weights_of(unit):
    return ({m: unit.value[m].weight.data for m in unit.names}, {m: unit.value[m].bias.data for m in unit.names},
            {m: unit.gate[m].weight.data for m in unit.names}, {m: unit.gate[m].bias.data for m in unit.names})


def test_single_modality_gate_sees_itself_only():
    unit = MGFUnit(["only"], 3, np.random.default_rng(0))
    assert unit.gate["only"].weight.shape == (3, 3)
    h = np.array([0.5, -0.2, 1.0])
    x = np.tanh(h @ unit.value["only"].weight.data)
    s = 1 / (1 + np.exp(-(h @ unit.gate["only"].weight.data)))
    np.testing.assert_allclose(mgf({"only": Tensor(h)}, unit).data, x * s, rtol=1e-14)


def test_zero_parameters_give_zero():
    unit = MGFUnit(["a", "b", "c"], 4, zero=True)
    vecs = {m: Tensor(np.random.default_rng(i).normal(size=4)) for i, m in enumerate("abc")}
    for x, s in unit.parts(vecs).values():
        np.testing.assert_array_equal(x.data, 0.0)
        np.testing.assert_array_equal(s.data, 0.5)
    np.testing.assert_array_equal(mgf(vecs, unit).data, np.zeros(4))


def test_two_modalities_hand_computation():
    unit = MGFUnit(["text", "tabular"], 2, np.random.default_rng(3))
    for lin in list(unit.value.values()) + list(unit.gate.values()):
        lin.bias.data = np.random.default_rng(4).normal(size=2) * 0.1
    h = {"tabular": np.array([0.3, -0.4]), "text": np.array([1.2, 0.1])}
    expect = mgf_scalar(h, *weights_of(unit))
    np.testing.assert_allclose(mgf({m: Tensor(v) for m, v in h.items()}, unit).data, expect, rtol=1e-13)


def test_gate_input_order_is_own_then_lexicographic():
    unit = MGFUnit(["c", "a", "b"], 1, zero=True)
    vecs = {"a": Tensor([1.0]), "b": Tensor([2.0]), "c": Tensor([3.0])}
    np.testing.assert_array_equal(unit.gate_input("b", vecs).data, [2.0, 1.0, 3.0])
    np.testing.assert_array_equal(unit.gate_input("c", vecs).data, [3.0, 1.0, 2.0])


def test_gate_range_and_saturation():
    rng = np.random.default_rng(0)
    unit = MGFUnit(["a", "b"], 5, rng)
    vecs = {m: Tensor(rng.normal(size=5) * 3) for m in "ab"}
    for _, s in unit.parts(vecs).values():
        assert np.all((s.data > 0) & (s.data < 1))
    g = unit.gate["a"]
    g.weight.data = np.zeros_like(g.weight.data)
    x_a = unit.parts(vecs)["a"][0].data
    g.bias.data = np.full(5, 30.0)
    np.testing.assert_allclose(unit.terms(vecs)["a"].data, x_a, atol=1e-9)
    g.bias.data = np.full(5, -30.0)
    np.testing.assert_allclose(unit.terms(vecs)["a"].data, 0.0, atol=1e-9)


def test_renaming_with_permuted_parameters_is_invariant():
    rng = np.random.default_rng(1)
    d = 3
    u1 = MGFUnit(["a", "b"], d, rng)
    u2 = MGFUnit(["x", "y"], d)
    # a -> y, b -> x: own block stays first, the single "other" block keeps its place
    for src, dst in (("a", "y"), ("b", "x")):
        u2.value[dst].weight.data = u1.value[src].weight.data.copy()
        u2.value[dst].bias.data = u1.value[src].bias.data.copy()
        u2.gate[dst].weight.data = u1.gate[src].weight.data.copy()
        u2.gate[dst].bias.data = u1.gate[src].bias.data.copy()
    ha, hb = rng.normal(size=d), rng.normal(size=d)
    np.testing.assert_allclose(u1({"a": Tensor(ha), "b": Tensor(hb)}).data,
                               u2({"y": Tensor(ha), "x": Tensor(hb)}).data, rtol=1e-14)


def test_missing_modality_contributes_nothing():
    rng = np.random.default_rng(2)
    unit = MGFUnit(["a", "b"], 3, rng)
    unit.value["b"].bias.data = np.full(3, 0.7)
    ha = Tensor(rng.normal(size=3))
    full = unit({"a": ha, "b": Tensor(np.zeros(3))})
    only = unit({"a": ha, "b": None})
    assert set(unit.terms({"a": ha, "b": None})) == {"a"}
    np.testing.assert_allclose(only.data, unit.terms({"a": ha, "b": Tensor(np.zeros(3))})["a"].data)
    assert not np.allclose(only.data, full.data)  # b's own term is gone, not just its input


def test_dimension_mismatch():
    unit = MGFUnit(["a", "b"], 3, np.random.default_rng(0))
    with pytest.raises(dc.DimensionError):
        unit({"a": Tensor(np.ones(3)), "b": Tensor(np.ones(4))})


def test_loss_values():
    head = ClassifierHead(4, 2, zero=True)
    assert classify_loss(Tensor(np.ones(4)), 1, head).item() == pytest.approx(math.log(2), abs=1e-12)
    assert cross_entropy(Tensor([1.0, 2.0, 3.0]), 2).item() == pytest.approx(
        -math.log(math.exp(3) / (math.exp(1) + math.exp(2) + math.exp(3))), rel=1e-14)
    assert cross_entropy(Tensor([1.0, 2.0, 3.0]), 2).item() == pytest.approx(0.4076, abs=5e-5)
    assert cross_entropy(Tensor([0.0, 800.0]), 1).item() < 1e-300
    batch = cross_entropy(Tensor([[1.0, 2.0, 3.0], [0.0, 0.0, 0.0]]), [2, 0]).item()
    assert batch == pytest.approx((0.40760596 + math.log(3)) / 2, rel=1e-7)


def test_bad_labels():
    for y in (2, -1, 0.5):
        with pytest.raises(LabelError):
            cross_entropy(Tensor([0.1, 0.2]), y)
    with pytest.raises(LabelError):
        cross_entropy(Tensor([[0.1, 0.2]]), [0, 1])


def test_gradient_through_mgf_and_loss():
    rng = np.random.default_rng(6)
    unit = MGFUnit(["a", "b", "c"], 4, rng)
    head = ClassifierHead(4, 3, rng)
    unit.assign_names("mgf.")
    head.assign_names("head.")
    vecs = {m: Tensor(rng.normal(size=(2, 4))) for m in "abc"}
    f = lambda: classify_loss(unit(vecs), np.array([2, 0]), head)  # noqa: E731
    assert dc.grad_check(f, unit.parameters() + head.parameters(), refine_dtype=np.longdouble) < 1e-6
