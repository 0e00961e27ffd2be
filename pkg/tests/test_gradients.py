"""Backprop against central differences for every primitive and the full attack graph.

Runs in float64: float32 central differences at eps=1e-3 carry rounding
error well above the 1e-3 relative tolerance.
"""

import numpy as np
import pytest

from ssat import attack, nets
from ssat import tensor as T
from ssat.gradcheck import grad_check
from ssat.tensor import Tensor

SEEDS = range(5)
TOL = 1e-3


def project(t, r):
    return T.sum_all(T.mul(t, Tensor(r)))


def away_from(x, points, gap=0.05):
    """Nudge entries off non-differentiable points so differences stay one-sided-free."""
    for p in points:
        near = np.abs(x - p) < gap
        x = np.where(near, p + np.sign(x - p + 1e-12) * gap, x)
    return x


def distinct(shape, rng):
    """Values with pairwise gaps >= 0.01 so max-pool argmaxes are stable under eps."""
    n = int(np.prod(shape))
    return (rng.permutation(n) * 0.01 + rng.normal(scale=1e-4, size=n)).reshape(shape) - n * 0.005


def case_add(rng, s):
    b = rng.normal(size=s)
    return rng.normal(size=s), lambda t, r: project(T.add(t, Tensor(b)), r), s


def case_add_scalar(rng, s):
    return rng.normal(size=s), lambda t, r: project(T.add(t, 3.5), r), s


def case_sub(rng, s):
    b = rng.normal(size=s)
    return rng.normal(size=s), lambda t, r: project(T.sub(Tensor(b), t), r), s


def case_mul(rng, s):
    b = rng.normal(size=s)
    return rng.normal(size=s), lambda t, r: project(T.mul(t, Tensor(b)), r), s


def case_mul_self(rng, s):
    return rng.normal(size=s), lambda t, r: project(T.mul(t, t), r), s


def case_scale(rng, s):
    return rng.normal(size=s), lambda t, r: project(T.scale(t, -2.5), r), s


def case_tanh(rng, s):
    return rng.normal(size=s), lambda t, r: project(T.tanh(t), r), s


def case_relu(rng, s):
    return away_from(rng.normal(size=s), [0.0]), lambda t, r: project(T.relu(t), r), s


def case_clamp(rng, s):
    x = away_from(rng.normal(scale=2.0, size=s), [-1.0, 1.0])
    return x, lambda t, r: project(T.clamp(t, -1.0, 1.0), r), s


def case_reshape(rng, s):
    flat = (int(np.prod(s)),)
    return rng.normal(size=s), lambda t, r: project(T.reshape(t, flat), r.reshape(flat)), s


def case_concat(rng, s):
    b = rng.normal(size=(s[0], 3) + s[2:])
    out = (s[0], s[1] + 3) + s[2:]
    return rng.normal(size=s), lambda t, r: project(T.concat_channels(t, Tensor(b)), r), out


def case_concat_right(rng, s):
    b = rng.normal(size=(s[0], 2) + s[2:])
    out = (s[0], s[1] + 2) + s[2:]
    return rng.normal(size=s), lambda t, r: project(T.concat_channels(Tensor(b), t), r), out


def case_slice(rng, s):
    out = (s[0], 1) + s[2:]
    return rng.normal(size=s), lambda t, r: project(T.slice_channels(t, 1, 2), r), out


def case_conv_input(rng, s):
    w = rng.normal(size=(3, s[1], 3, 3))
    out = (s[0], 3) + s[2:]
    return rng.normal(size=s), lambda t, r: project(T.conv2d(t, Tensor(w), None, padding=1), r), out


def case_conv_weight(rng, s):
    x = rng.normal(size=s)
    out = (s[0], 3) + s[2:]
    return rng.normal(size=(3, s[1], 3, 3)), lambda t, r: project(T.conv2d(Tensor(x), t, None, padding=1), r), out


def case_conv_bias(rng, s):
    x, w = rng.normal(size=s), rng.normal(size=(3, s[1], 3, 3))
    out = (s[0], 3) + s[2:]
    return rng.normal(size=3), lambda t, r: project(T.conv2d(Tensor(x), Tensor(w), t, padding=1), r), out


def case_conv_strided(rng, s):
    w = rng.normal(size=(2, s[1], 3, 3))
    out = (s[0], 2, (s[2] - 1) // 2 + 1, (s[3] - 1) // 2 + 1)
    return rng.normal(size=s), lambda t, r: project(T.conv2d(t, Tensor(w), None, stride=2, padding=1), r), out


def case_conv_pointwise(rng, s):
    x = rng.normal(size=s)
    out = (s[0], 4) + s[2:]
    return rng.normal(size=(4, s[1], 1, 1)), lambda t, r: project(T.conv2d(Tensor(x), t, None), r), out


def case_maxpool(rng, s):
    out = s[:2] + (s[2] // 2, s[3] // 2)
    return distinct(s, rng), lambda t, r: project(T.maxpool2d(t), r), out


def case_upsample(rng, s):
    out = s[:2] + (s[2] * 2, s[3] * 2)
    return rng.normal(size=s), lambda t, r: project(T.upsample_bilinear(t, 2), r), out


def case_upsample_x3(rng, s):
    out = s[:2] + (s[2] * 3, s[3] * 3)
    return rng.normal(size=s), lambda t, r: project(T.upsample_bilinear(t, 3), r), out


def case_cross_entropy(rng, s):
    labels = rng.integers(0, s[1], size=(s[0],) + s[2:])
    weights = rng.uniform(0.0, 2.0, size=labels.shape)
    return rng.normal(size=s), lambda t, r: T.scale(T.cross_entropy_pixelwise(t, labels, weights), float(r.sum())), (1,)


def case_sum_all(rng, s):
    return rng.normal(size=s), lambda t, r: T.scale(T.sum_all(t), float(r[0])), (1,)


PRIMITIVES = {
    name[5:]: fn for name, fn in sorted(globals().items()) if name.startswith("case_")
}
SHAPES = [(1, 2, 4, 4), (2, 3, 6, 8)]


@pytest.mark.parametrize("shape", SHAPES, ids=lambda s: "x".join(map(str, s)))
@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive(name, seed, shape):
    rng = np.random.default_rng(seed)
    x, f, out_shape = PRIMITIVES[name](rng, shape)
    r = rng.normal(size=out_shape)
    assert grad_check(lambda t: f(t, r), np.asarray(x, dtype=np.float64), eps=1e-3) < TOL


def test_every_differentiable_op_is_covered():
    ops = {"add", "sub", "mul", "scale", "tanh", "relu", "clamp", "reshape", "concat", "slice",
           "conv_input", "conv_weight", "conv_bias", "maxpool", "upsample", "cross_entropy", "sum_all"}
    assert ops <= set(PRIMITIVES)


def tiny_models(seed):
    gen = nets.cast_model(
        nets.build_generator_unet(nets.ModelConfig(kind=nets.GENERATOR_UNET, base_width=4, num_classes=3, seed=seed)),
        np.float64,
    )
    tgt = nets.cast_model(
        nets.build_target_fcn(nets.ModelConfig(kind=nets.TARGET_FCN, base_width=4, num_classes=3, seed=seed + 100)),
        np.float64,
    ).freeze()
    return gen, tgt


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("param", ["pert_head.weight", "reg_head.weight", "enc1.weight", "dec0.bias"])
def test_attack_graph(seed, param):
    """generator -> scale -> apply -> frozen target -> weighted CE + lambda0 * regularizer CE."""
    rng = np.random.default_rng(seed)
    gen, tgt = tiny_models(seed)
    # interior pixels keep x +- xi inside [0, 255] so the clamp stays smooth
    x = Tensor(rng.uniform(20, 235, size=(2, 3, 8, 8)))
    y = rng.integers(0, 3, size=(2, 8, 8))
    with T.no_grad():
        clean = nets.forward_target(tgt, x)
    spec = attack.AttackSpec(attack.VANISH, target_classes=[1])
    stealthy = attack.stealthy_labels(clean, spec)
    base = dict(gen.params)

    def loss(t):
        params = dict(base)
        params[param] = t
        out = nets.forward_generator(nets.Model(gen.config, params), x)
        x_adv = attack.apply_perturbation(x, attack.scale_perturbation(out.raw_perturbation, 10.0))
        adv = attack.adversarial_loss(nets.forward_target(tgt, x_adv), stealthy, w_t=2.0, w_nt=1.0)
        reg = attack.regularizer_loss(out.regularizer_logits, y)
        return attack.total_loss(adv, reg, 1e-2)

    # relu and max-pool kinks sit within 1e-3 of deep weights; 1e-4 stays on one side
    assert grad_check(loss, base[param].data, eps=1e-4) < TOL
