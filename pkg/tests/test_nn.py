import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from feddp.errors import FormatError, NumericError, StructuralError, UsageError
from feddp.nn import backward, cosine_lr, forward, init_params, param_layout, preset, sgd_step
from feddp.nn import layers
from feddp.nn.autodiff import Tape
from feddp.nn.params import Param, ParamSet
from feddp.nn.spec import FLATTEN, GAP, RELU, ModelSpec, conv, fc, norm


def pset(**arrays_):
    return ParamSet([(k, Param(np.asarray(v, dtype=np.float64))) for k, v in arrays_.items()])


# -- ParamSet ---------------------------------------------------------------

def test_structure_checks():
    a = pset(x=np.zeros(2), y=np.zeros((2, 3)))
    b = pset(x=np.zeros(2), y=np.zeros((3, 2)))
    assert not a.structure_equal(b)
    with pytest.raises(StructuralError):
        a + b


def test_algebra_keeps_trainable_flags():
    ps = ParamSet([("w", Param(np.ones(2))), ("rm", Param(np.ones(2), trainable=False))])
    out = (ps + ps).scale(0.5)
    assert [p.trainable for _, p in out] == [True, False]
    assert out.bitwise_equal(ps)


dyadic = arrays(np.float64, 5, elements=st.integers(-2**40, 2**40).map(lambda v: v / 2**20))


@settings(max_examples=100, deadline=None)
@given(dyadic, dyadic)
def test_add_then_subtract_round_trips_on_a_dyadic_grid(a, b):
    pa, pb = pset(v=a), pset(v=b)
    assert ((pa + pb) - pb).bitwise_equal(pa)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 3), st.integers(1, 4)),
              elements=st.floats(allow_nan=True, allow_infinity=True)))
def test_blob_round_trip(v):
    ps = ParamSet([("layer.weight", Param(v)), ("layer.rm", Param(v[0], trainable=False))])
    blob = ps.to_bytes()
    assert len(blob) == ps.nbytes()
    back = ParamSet.from_bytes(blob)
    assert back.bitwise_equal(ps)
    assert [p.trainable for _, p in back] == [True, False]


def test_blob_rejects_corruption():
    blob = pset(w=np.arange(4.0)).to_bytes()
    with pytest.raises(FormatError):
        ParamSet.from_bytes(b"XXXX" + blob[4:])
    with pytest.raises(FormatError):
        ParamSet.from_bytes(blob[:-1])
    with pytest.raises(FormatError):
        ParamSet.from_bytes(blob + b"\0")


# -- tape -------------------------------------------------------------------

def test_tape_is_single_use():
    tape = Tape()
    w = Param(np.ones((2, 3)))
    y = layers.linear(tape.leaf(np.ones((1, 3))), w, None, "fc")
    backward(tape, root=y)
    with pytest.raises(UsageError):
        backward(tape)
    with pytest.raises(UsageError):
        tape.leaf(np.ones(1))


def test_non_finite_activation_names_layer():
    tape = Tape()
    w = Param(np.array([[np.inf]]))
    with pytest.raises(NumericError, match="'fc7'"):
        layers.linear(tape.leaf(np.ones((1, 1))), w, None, "fc7")


def test_nodes_from_two_tapes_do_not_mix():
    a, b = Tape(), Tape()
    with pytest.raises(UsageError):
        layers.add(a.leaf(np.ones(2)), b.leaf(np.ones(2)), "sum")


# -- finite differences per op ----------------------------------------------

def numeric_check(build, params, eps=1e-6, tol=1e-6, per_param=12, seed=0):
    """Central differences on a random subset of every param's entries."""
    for _, p in params:
        p.zero_grad()
    node = build()
    backward(node.tape, root=node)
    rng = np.random.default_rng(seed)
    for name, p in params:
        flat = p.value.reshape(-1)
        picks = rng.choice(flat.size, size=min(per_param, flat.size), replace=False)
        for i in picks:
            old = flat[i]
            flat[i] = old + eps
            up = float(build().value)
            flat[i] = old - eps
            down = float(build().value)
            flat[i] = old
            num = (up - down) / (2 * eps)
            ana = p.grad.reshape(-1)[i]
            assert abs(ana - num) <= tol * max(1.0, abs(num)), (name, i, ana, num)


def probe(node, head, labels):
    """Flatten, project to logits and take the cross-entropy."""
    flat = layers.flatten(node, "flat")
    return layers.cross_entropy(layers.linear(flat, head, None, "head"), labels)


@pytest.mark.parametrize("stride,padding", [(1, 1), (2, 1), (1, 0), (2, 0)])
def test_conv_gradients(stride, padding):
    rng = np.random.default_rng(1)
    x = rng.standard_normal((2, 3, 6, 6))
    w, b = Param(rng.standard_normal((4, 3, 3, 3))), Param(rng.standard_normal(4))
    ho = (6 + 2 * padding - 3) // stride + 1
    head = Param(rng.standard_normal((3, 4 * ho * ho)) * 0.1)
    # the input is routed through a 1x1 conv so its gradient is checked too
    pre = Param(rng.standard_normal((3, 3, 1, 1)))

    def build():
        h = layers.conv2d(Tape().leaf(x), pre, None, 1, 0, "pre")
        return probe(layers.conv2d(h, w, b, stride, padding, "conv"), head, [0, 2])

    numeric_check(build, pset_of(w=w, b=b, head=head, pre=pre))


def pset_of(**params):
    return ParamSet(list(params.items()))


def test_conv_matches_direct_loops():
    rng = np.random.default_rng(2)
    x, w, b = rng.standard_normal((2, 2, 5, 5)), rng.standard_normal((3, 2, 3, 3)), rng.standard_normal(3)
    got = layers.conv2d_raw(x, w, b, stride=2, padding=1)
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    want = np.zeros((2, 3, 3, 3))
    for n in range(2):
        for o in range(3):
            for i in range(3):
                for j in range(3):
                    want[n, o, i, j] = (xp[n, :, 2 * i:2 * i + 3, 2 * j:2 * j + 3] * w[o]).sum() + b[o]
    assert np.allclose(got, want, atol=1e-12)


@pytest.mark.parametrize("masked", [False, True])
def test_batch_norm_gradients(masked):
    rng = np.random.default_rng(3)
    x = rng.standard_normal((4, 3, 3, 3))
    gamma, beta = Param(rng.uniform(0.5, 1.5, 3)), Param(rng.standard_normal(3))
    rm, rv = Param(np.zeros(3), trainable=False), Param(np.ones(3), trainable=False)
    pre = Param(rng.standard_normal((3, 3, 1, 1)))
    head = Param(rng.standard_normal((2, 27)) * 0.3)
    mask = np.array([[1, 0, 1], [1, 1, 0], [0, 1, 1], [1, 0, 1]], bool) if masked else None

    def build():
        h = layers.conv2d(Tape().leaf(x), pre, None, 1, 0, "pre")
        return probe(layers.batch_norm(h, gamma, beta, rm, rv, "bn", mask=mask), head,
                     [0, 1, 1, 0])

    numeric_check(build, pset_of(gamma=gamma, beta=beta, pre=pre, head=head), tol=1e-5)


def test_masked_norm_semantics():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((3, 4, 2, 2)) + 5
    gamma, beta = Param(np.ones(4)), Param(np.full(4, 0.3))
    rm, rv = Param(np.zeros(4), trainable=False), Param(np.ones(4), trainable=False)
    mask = np.array([[1, 1, 0, 0], [1, 0, 0, 0], [0, 1, 0, 0]], bool)
    y = layers.batch_norm(Tape().leaf(x), gamma, beta, rm, rv, "bn", mask=mask).value
    assert np.all(y[~mask] == 0.0)
    # channels 2 and 3 were selected by nobody: running stats untouched
    assert rm.value[2:].tolist() == [0.0, 0.0] and rv.value[2:].tolist() == [1.0, 1.0]
    # channel 0 normalizes over samples 0 and 1 only
    sel = x[[0, 1], 0]
    expect = (sel - sel.mean()) / np.sqrt(sel.var() + 1e-5) + 0.3
    assert np.allclose(y[[0, 1], 0], expect)
    assert rm.value[0] == pytest.approx(0.1 * sel.mean())


def test_eval_norm_uses_running_stats():
    gamma, beta = Param(np.array([2.0])), Param(np.array([1.0]))
    rm, rv = Param(np.array([3.0]), trainable=False), Param(np.array([4.0]), trainable=False)
    x = np.full((1, 1, 1, 1), 7.0)
    y = layers.batch_norm(Tape().leaf(x), gamma, beta, rm, rv, "bn", train=False, eps=0.0)
    assert y.value.item() == 2.0 * (7 - 3) / 2 + 1


def test_pool_relu_mean_gradients():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((2, 2, 4, 4))
    pre = Param(rng.standard_normal((3, 2, 1, 1)))
    head = Param(rng.standard_normal((2, 3)))

    def build():
        h = layers.conv2d(Tape().leaf(x), pre, None, 1, 0, "pre")
        h = layers.avg_pool(layers.relu(h, "relu"), 2, "pool")
        h = layers.spatial_mean(h, "gap")
        return layers.cross_entropy(layers.linear(h, head, None, "fc"), [1, 0])

    numeric_check(build, pset_of(pre=pre, head=head))


def test_saliency_scaling_and_l1_gradients():
    rng = np.random.default_rng(6)
    x = rng.standard_normal((3, 2, 3, 3))
    gw, gb = Param(rng.standard_normal((4, 2))), Param(rng.standard_normal(4))
    cw = Param(rng.standard_normal((4, 2, 3, 3)))
    head = Param(rng.standard_normal((2, 36)) * 0.2)
    mask = np.array([[1, 0, 1, 0], [0, 1, 1, 0], [1, 1, 0, 0]], float)

    def build():
        leaf = Tape().leaf(x)
        pre = layers.linear(layers.spatial_mean(leaf, "s"), gw, gb, "g")
        scale = layers.mul_const(layers.sigmoid(pre, "sig"), mask, "mask")
        y = layers.channel_scale(layers.conv2d(leaf, cw, None, 1, 1, "c"), scale, "scale")
        ce = probe(y, head, [0, 1, 0])
        return layers.add_scalars([ce, layers.l1_mean([pre], 0.05, "l1")], "loss")

    numeric_check(build, pset_of(gw=gw, gb=gb, cw=cw, head=head))


def test_cross_entropy_value_and_range():
    tape = Tape()
    z = tape.leaf(np.log(np.array([[1.0, 3.0]])))
    assert layers.cross_entropy(z, [1]).value == pytest.approx(-np.log(0.75))
    with pytest.raises(StructuralError):
        layers.cross_entropy(Tape().leaf(np.zeros((1, 2))), [2])


# -- optimizer --------------------------------------------------------------

def test_sgd_step_skips_running_stats_and_applies_decay():
    ps = ParamSet([("w", Param(np.array([1.0]))), ("rm", Param(np.array([5.0]), trainable=False))])
    ps["w"].grad[...] = 2.0
    ps["rm"].grad[...] = 9.0
    sgd_step(ps, 0.5, weight_decay=0.5)
    assert ps["w"].value[0] == 1.0 - 0.5 * (2.0 + 0.5)
    assert ps["rm"].value[0] == 5.0


def test_cosine_schedule():
    assert cosine_lr(0, 10, 0.1) == pytest.approx(0.1)
    assert cosine_lr(5, 10, 0.1) == pytest.approx(0.05)
    assert cosine_lr(9, 10, 0.1) > 0
    with pytest.raises(ValueError):
        cosine_lr(10, 10, 0.1)


# -- model specs ------------------------------------------------------------

def test_presets_and_counts():
    m = preset("tiny-vgg")
    assert m.num_params() == 6468
    assert [u.name for u in m.gated_units()] == ["conv2", "conv3", "conv4"]
    assert sum(np.prod(s) for _, s, t in param_layout(m) if t) == m.num_params()
    with pytest.raises(StructuralError, match="unknown model preset"):
        preset("alexnet")


def test_structural_validation():
    with pytest.raises(StructuralError, match="first convolution"):
        ModelSpec("m", (3, 4, 4), 2, (conv("c1", 3, 4, gated=True), GAP, FLATTEN, fc("f", 4, 2)))
    with pytest.raises(StructuralError, match="channels"):
        ModelSpec("m", (3, 4, 4), 2, (conv("c1", 3, 4), norm("n", 5), GAP, FLATTEN, fc("f", 4, 2)))
    with pytest.raises(StructuralError, match="num_classes"):
        ModelSpec("m", (3, 4, 4), 2, (conv("c1", 3, 4), GAP, FLATTEN, fc("f", 4, 3)))
    with pytest.raises(StructuralError):
        conv("c", 1, 1).__class__("pool", gated=True)


def test_forward_rejects_wrong_input_shape():
    m = preset("tiny-vgg")
    with pytest.raises(StructuralError, match="input shape"):
        forward(m, init_params(m, np.random.default_rng(0)), np.zeros((1, 3, 9, 9)))


def test_resnet_preset_runs_with_gates():
    from feddp import dpgate
    m = preset("tiny-resnet")
    rng = np.random.default_rng(0)
    w = init_params(m, rng)
    gates = dpgate.build_gates(m, rng)
    out, tape = forward(m, w, rng.standard_normal((3, 3, 8, 8)), gates)
    assert out.shape == (3, 4)
    assert len(tape.decisions) == 3
    backward(tape, root=layers.cross_entropy(out, [0, 1, 2]))


def test_relu_layer_in_model_is_shape_preserving():
    m = ModelSpec("m", (2, 4, 4), 2, (conv("c1", 2, 3), RELU, GAP, FLATTEN, fc("f", 3, 2)))
    out, _ = forward(m, init_params(m, np.random.default_rng(0)), np.ones((1, 2, 4, 4)))
    assert out.shape == (1, 2)
