"""Desk-scale segmentation target and dual-head perturbation generator.

Both networks share one encoder layout: four 3x3 conv stages at full, 1/2,
1/4 and 1/8 resolution separated by 2x2 max pools. They differ in the
decoder:

* ``TargetFCN`` upsamples, projects with a 1x1 conv and *adds* the encoder
  skip (FCN style), then scores classes with a 1x1 head.
* ``GeneratorUNet`` upsamples, *concatenates* the encoder skip and fuses
  with a 1x1 conv (UNet style). Two sibling 1x1 heads read the final
  feature map: a 3-channel perturbation head and a class-logit regularizer
  head.
"""

from dataclasses import asdict, dataclass, replace

import numpy as np

from . import tensor as T
from .tensor import Tensor

TARGET_FCN = "TargetFCN"
GENERATOR_UNET = "GeneratorUNet"
KINDS = (TARGET_FCN, GENERATOR_UNET)
WIDTH_MULTIPLIERS = (1.0, 0.5, 0.25)


@dataclass(frozen=True)
class ModelConfig:
    kind: str = TARGET_FCN
    in_channels: int = 3
    num_classes: int = 8
    base_width: int = 16
    width_multiplier: float = 1.0
    seed: int = 0
    regularizer_head: bool = True

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}; expected one of {KINDS}")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.in_channels < 1 or self.base_width < 1:
            raise ValueError("in_channels and base_width must be positive")
        if self.width_multiplier <= 0:
            raise ValueError("width_multiplier must be positive")

    def width(self, level):
        return max(4, int(round(self.base_width * 2**level * self.width_multiplier)))

    @property
    def widths(self):
        """Channel counts of the four encoder stages (the 1/8 stage reuses level 2)."""
        c0, c1, c2 = self.width(0), self.width(1), self.width(2)
        return c0, c1, c2, c2

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown ModelConfig fields: {sorted(unknown)}")
        return cls(**d)


def param_shapes(config):
    """Ordered ``name -> shape`` map for a config. Biases are 1-d."""
    c0, c1, c2, c3 = config.widths
    cin, ncls = config.in_channels, config.num_classes
    convs = [
        ("enc0", c0, cin, 3),
        ("enc1", c1, c0, 3),
        ("enc2", c2, c1, 3),
        ("enc3", c3, c2, 3),
    ]
    if config.kind == TARGET_FCN:
        convs += [
            ("dec2", c2, c3, 1),
            ("dec1", c1, c2, 1),
            ("dec0", c0, c1, 1),
            ("head", ncls, c0, 1),
        ]
    else:
        convs += [
            ("dec2", c2, c3 + c2, 1),
            ("dec1", c1, c2 + c1, 1),
            ("dec0", c0, c1 + c0, 1),
            ("pert_head", cin, c0, 1),
        ]
        if config.regularizer_head:
            convs.append(("reg_head", ncls, c0, 1))
    shapes = {}
    for name, cout, cin_, k in convs:
        shapes[f"{name}.weight"] = (cout, cin_, k, k)
        shapes[f"{name}.bias"] = (cout,)
    return shapes


@dataclass
class Model:
    config: ModelConfig
    params: dict
    frozen: bool = False

    def freeze(self):
        self.frozen = True
        for p in self.params.values():
            p.requires_grad = False
            p.grad = None
        return self

    def unfreeze(self):
        self.frozen = False
        for p in self.params.values():
            p.requires_grad = True
        return self

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def __getitem__(self, name):
        return self.params[name]


@dataclass
class GeneratorOutput:
    raw_perturbation: Tensor
    regularizer_logits: Tensor = None


def init_params(config):
    """Kaiming-uniform weights (relu gain), zero biases, drawn in name order from ``config.seed``."""
    rng = np.random.default_rng(config.seed)
    params = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".weight"):
            fan_in = shape[1] * shape[2] * shape[3]
            bound = np.sqrt(6.0 / fan_in)
            data = rng.uniform(-bound, bound, size=shape).astype(np.float32)
        else:
            data = np.zeros(shape, dtype=np.float32)
        params[name] = Tensor(data, requires_grad=True, name=name)
    return params


def build_target_fcn(config):
    if config.kind != TARGET_FCN:
        raise ValueError(f"build_target_fcn needs kind={TARGET_FCN!r}, got {config.kind!r}")
    return Model(config, init_params(config))


def build_generator_unet(config):
    if config.kind != GENERATOR_UNET:
        raise ValueError(f"build_generator_unet needs kind={GENERATOR_UNET!r}, got {config.kind!r}")
    return Model(config, init_params(config))


def build_model(config):
    if config.kind == TARGET_FCN:
        return build_target_fcn(config)
    return build_generator_unet(config)


def count_params(model):
    return int(sum(p.size for p in model.params.values()))


def cast_model(model, dtype):
    """Copy of ``model`` with every parameter cast to ``dtype`` (for float64 gradient checks)."""
    params = {
        k: Tensor(v.data.astype(dtype), requires_grad=v.requires_grad, name=k) for k, v in model.params.items()
    }
    return Model(model.config, params, model.frozen)


def copy_model(model):
    return cast_model(model, np.float32)


def with_config(model, **changes):
    return Model(replace(model.config, **changes), model.params, model.frozen)


# --------------------------------------------------------------------------
# forward passes
# --------------------------------------------------------------------------

def _check_image(model, image):
    if image.data.ndim != 4:
        raise ValueError(f"expected an n x {model.config.in_channels} x h x w image batch, got {image.shape}")
    n, c, h, w = image.shape
    if c != model.config.in_channels:
        raise ValueError(f"image has {c} channels, model expects {model.config.in_channels}")
    if h % 8 or w % 8:
        raise ValueError(f"image spatial size {h}x{w} must be divisible by 8")


def _conv(p, name, x, pad):
    return T.conv2d(x, p[f"{name}.weight"], p[f"{name}.bias"], stride=1, padding=pad)


def _encode(p, image):
    # pixels in [0, 255] -> roughly [-1, 1]
    x = T.add(T.scale(image, 1.0 / 127.5), -1.0)
    e0 = T.relu(_conv(p, "enc0", x, 1))
    e1 = T.relu(_conv(p, "enc1", T.maxpool2d(e0), 1))
    e2 = T.relu(_conv(p, "enc2", T.maxpool2d(e1), 1))
    e3 = T.relu(_conv(p, "enc3", T.maxpool2d(e2), 1))
    return e0, e1, e2, e3


def forward_target(model, image):
    """Class logits n x num_classes x h x w from a TargetFCN."""
    if model.config.kind != TARGET_FCN:
        raise ValueError("forward_target needs a TargetFCN model")
    _check_image(model, image)
    p = model.params
    e0, e1, e2, e3 = _encode(p, image)
    d2 = T.relu(T.add(_conv(p, "dec2", T.upsample_bilinear(e3, 2), 0), e2))
    d1 = T.relu(T.add(_conv(p, "dec1", T.upsample_bilinear(d2, 2), 0), e1))
    d0 = T.relu(T.add(_conv(p, "dec0", T.upsample_bilinear(d1, 2), 0), e0))
    return _conv(p, "head", d0, 0)


def generator_features(model, image):
    _check_image(model, image)
    p = model.params
    e0, e1, e2, e3 = _encode(p, image)
    d2 = T.relu(_conv(p, "dec2", T.concat_channels(T.upsample_bilinear(e3, 2), e2), 0))
    d1 = T.relu(_conv(p, "dec1", T.concat_channels(T.upsample_bilinear(d2, 2), e1), 0))
    d0 = T.relu(_conv(p, "dec0", T.concat_channels(T.upsample_bilinear(d1, 2), e0), 0))
    return d0


def forward_generator(model, image, with_regularizer=True):
    """Raw (pre-scaling) perturbation and, if the model has the head, regularizer logits."""
    if model.config.kind != GENERATOR_UNET:
        raise ValueError("forward_generator needs a GeneratorUNet model")
    feats = generator_features(model, image)
    raw = _conv(model.params, "pert_head", feats, 0)
    reg = None
    if with_regularizer and "reg_head.weight" in model.params:
        reg = _conv(model.params, "reg_head", feats, 0)
    return GeneratorOutput(raw, reg)


def predict(model, image):
    """argmax labels (n, h, w) of a target model, no graph recorded."""
    with T.no_grad():
        logits = forward_target(model, image)
    return np.argmax(logits.data, axis=1).astype(np.int64)
