"""Stealthy label mapping, attack losses and the generator training loop.

The generator sees only the clean image. Its raw output is squashed to
``xi * tanh(raw)`` and added to the image; the frozen target then labels
the result. The training target for those labels is the clean prediction
with the attacked pixels rewritten by one of three mappers:

* vanish:   pixels predicted as a target class take the most likely
            non-target class instead;
* embed:    pixels under an external mask take a fake class;
* displace: vanish first, then embed (embed wins where they overlap).
"""

import json
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .nets import GENERATOR_UNET, ModelConfig, build_target_fcn, forward_generator, forward_target
from .optim import adam, optimizer_step
from .pnm import read_pnm
from .tensor import Tensor

log = logging.getLogger(__name__)

VANISH, EMBED, DISPLACE = "Vanish", "Embed", "Displace"
ATTACK_TYPES = (VANISH, EMBED, DISPLACE)
STRICT, VANISH_MODE, EMBED_MODE = "Strict", "VanishMode", "EmbedMode"
SUCCESS_MODES = (STRICT, VANISH_MODE, EMBED_MODE)
DEFAULT_SUCCESS_MODE = {VANISH: VANISH_MODE, EMBED: EMBED_MODE, DISPLACE: STRICT}


def _strict_fields(cls, d):
    unknown = set(d) - set(cls.__dataclass_fields__)
    if unknown:
        raise ValueError(f"unknown {cls.__name__} fields: {sorted(unknown)}")


# --------------------------------------------------------------------------
# attack description
# --------------------------------------------------------------------------

@dataclass
class AttackSpec:
    attack_type: str = VANISH
    target_classes: list = field(default_factory=list)
    fake_class: int = None
    mask_source: object = None
    success_mode: str = None

    def __post_init__(self):
        if self.attack_type not in ATTACK_TYPES:
            raise ValueError(f"attack_type must be one of {ATTACK_TYPES}, got {self.attack_type!r}")
        self.target_classes = sorted({int(c) for c in self.target_classes or ()})
        if self.attack_type in (VANISH, DISPLACE) and not self.target_classes:
            raise ValueError(f"{self.attack_type} attack needs non-empty target_classes")
        if self.attack_type in (EMBED, DISPLACE):
            if self.fake_class is None or self.mask_source is None:
                raise ValueError(f"{self.attack_type} attack needs fake_class and mask_source")
        if self.attack_type == DISPLACE and self.fake_class in self.target_classes:
            raise ValueError("Displace attack: fake_class must not be one of target_classes")
        if self.fake_class is not None:
            self.fake_class = int(self.fake_class)
        if self.success_mode is None:
            self.success_mode = DEFAULT_SUCCESS_MODE[self.attack_type]
        if self.success_mode not in SUCCESS_MODES:
            raise ValueError(f"success_mode must be one of {SUCCESS_MODES}, got {self.success_mode!r}")

    def check_classes(self, num_classes):
        used = list(self.target_classes) + ([self.fake_class] if self.fake_class is not None else [])
        bad = [c for c in used if not 0 <= c < num_classes]
        if bad:
            raise ValueError(f"attack spec uses class ids {bad} outside [0, {num_classes})")
        if self.attack_type in (VANISH, DISPLACE) and len(self.target_classes) >= num_classes:
            raise ValueError("target_classes cover every class; no vanish destination exists")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        _strict_fields(cls, d)
        return cls(**d)

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)


@dataclass
class AttackTrainConfig:
    lr: float = 1e-4
    batch: int = 8
    lambda0: float = 1e-2
    xi: float = 10.0
    epochs: int = 10
    seed: int = 0
    target_weight: float = 1.0
    preserve_weight: float = 1.0
    regularizer_enabled: bool = True

    def __post_init__(self):
        if self.xi <= 0:
            raise ValueError("xi must be > 0")
        if self.lambda0 < 0:
            raise ValueError("lambda0 must be >= 0")
        if self.target_weight < 0 or self.preserve_weight < 0:
            raise ValueError("loss weights must be >= 0")
        if self.batch < 1 or self.epochs < 0:
            raise ValueError("batch must be >= 1 and epochs >= 0")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        _strict_fields(cls, d)
        return cls(**d)


@dataclass
class PretrainConfig:
    epochs: int = 8
    lr: float = 2e-3
    batch: int = 8
    seed: int = 0
    base_width: int = 16
    width_multiplier: float = 1.0

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        _strict_fields(cls, d)
        return cls(**d)


# --------------------------------------------------------------------------
# external masks
# --------------------------------------------------------------------------

def silhouette_mask(height, width, seed=0, count=1):
    """Fixed person-like silhouettes (ellipse body + head) in the lower half of the frame."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:height, 0:width]
    mask = np.zeros((height, width), dtype=bool)
    for _ in range(count):
        ph = rng.uniform(0.2, 0.28) * height
        rx = max(1.5, ph / 5.0)
        bottom = rng.uniform(0.7, 0.95) * height
        cx = rng.uniform(0.15, 0.85) * width
        cy = bottom - 0.4 * ph
        body = ((yy - cy) / (0.4 * ph)) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
        hy = bottom - 0.85 * ph
        head = ((yy - hy) / (0.15 * ph)) ** 2 + ((xx - cx) / (0.8 * rx)) ** 2 <= 1.0
        mask |= body | head
    return mask


def resolve_mask(source, height, width):
    """Boolean (h, w) mask from a silhouette descriptor dict or a P5 PGM path (nonzero = on)."""
    if isinstance(source, np.ndarray):
        mask = source.astype(bool)
    elif isinstance(source, dict):
        kind = source.get("kind", "silhouette")
        if kind == "silhouette":
            mask = silhouette_mask(height, width, int(source.get("seed", 0)), int(source.get("count", 1)))
        elif kind == "pgm":
            mask = read_pnm(source["path"]) > 0
        else:
            raise ValueError(f"unknown mask source kind {kind!r}")
    elif isinstance(source, str):
        mask = read_pnm(source) > 0
    else:
        raise ValueError(f"unsupported mask source {source!r}")
    if mask.ndim != 2:
        raise ValueError("mask must be a single-channel image")
    if mask.shape != (height, width):
        raise ValueError(f"mask size {mask.shape} does not match image size {(height, width)}")
    return mask


# --------------------------------------------------------------------------
# stealthy label mappers
# --------------------------------------------------------------------------

@dataclass
class StealthyLabels:
    labels: np.ndarray  # (n, h, w) int64
    mask: np.ndarray  # (n, h, w) bool
    vanish_mask: np.ndarray = None
    embed_mask: np.ndarray = None


def _logits_array(l_x):
    arr = l_x.data if isinstance(l_x, Tensor) else np.asarray(l_x)
    if arr.ndim != 4:
        raise ValueError(f"expected (n, c, h, w) logits, got shape {arr.shape}")
    return arr


def map_vanish(l_x, target_classes):
    logits = _logits_array(l_x)
    c = logits.shape[1]
    targets = sorted({int(t) for t in target_classes})
    if not targets:
        raise ValueError("map_vanish: target_classes is empty")
    if any(not 0 <= t < c for t in targets):
        raise ValueError(f"map_vanish: target classes {targets} out of range for {c} classes")
    if len(targets) >= c:
        raise ValueError("map_vanish: target classes cover all classes; no destination label exists")
    clean = np.argmax(logits, axis=1)
    mask = np.isin(clean, targets)
    masked = logits.astype(np.float64, copy=True)
    masked[:, targets] = -np.inf
    dest = np.argmax(masked, axis=1)
    labels = np.where(mask, dest, clean).astype(np.int64)
    return StealthyLabels(labels, mask, vanish_mask=mask, embed_mask=np.zeros_like(mask))


def _broadcast_mask(mask, n, h, w):
    mask = np.asarray(mask, dtype=bool)
    if mask.shape == (h, w):
        return np.broadcast_to(mask, (n, h, w)).copy()
    if mask.shape == (n, h, w):
        return mask.copy()
    raise ValueError(f"mask shape {mask.shape} does not match logits spatial size {(h, w)}")


def map_embed(l_x, mask, fake_class):
    logits = _logits_array(l_x)
    n, c, h, w = logits.shape
    if not 0 <= int(fake_class) < c:
        raise ValueError(f"map_embed: fake_class {fake_class} out of range for {c} classes")
    m = _broadcast_mask(mask, n, h, w)
    clean = np.argmax(logits, axis=1)
    labels = np.where(m, int(fake_class), clean).astype(np.int64)
    return StealthyLabels(labels, m, vanish_mask=np.zeros_like(m), embed_mask=m)


def map_displace(l_x, target_classes, mask, fake_class):
    logits = _logits_array(l_x)
    n, c, h, w = logits.shape
    if int(fake_class) in {int(t) for t in target_classes}:
        raise ValueError("map_displace: fake_class must not be a target class")
    v = map_vanish(logits, target_classes)
    if not 0 <= int(fake_class) < c:
        raise ValueError(f"map_displace: fake_class {fake_class} out of range for {c} classes")
    m = _broadcast_mask(mask, n, h, w)
    labels = np.where(m, int(fake_class), v.labels).astype(np.int64)
    return StealthyLabels(labels, v.mask | m, vanish_mask=v.mask, embed_mask=m)


def stealthy_labels(l_x, spec, mask=None):
    """Apply the mapper selected by ``spec`` (``mask`` overrides spec.mask_source)."""
    logits = _logits_array(l_x)
    _, _, h, w = logits.shape
    if spec.attack_type == VANISH:
        return map_vanish(logits, spec.target_classes)
    if mask is None:
        mask = resolve_mask(spec.mask_source, h, w)
    if spec.attack_type == EMBED:
        return map_embed(logits, mask, spec.fake_class)
    return map_displace(logits, spec.target_classes, mask, spec.fake_class)


# --------------------------------------------------------------------------
# perturbation and losses
# --------------------------------------------------------------------------

def scale_perturbation(raw, xi):
    """xi * tanh(raw): bounded by xi in infinity norm and smooth everywhere."""
    if xi <= 0:
        raise ValueError("xi must be > 0")
    return T.scale(T.tanh(raw), xi)


def apply_perturbation(image, p):
    if image.shape != p.shape:
        raise ValueError(f"apply_perturbation: image {image.shape} and perturbation {p.shape} differ")
    return T.clamp(T.add(image, p), 0.0, 255.0)


def adversarial_loss(l_hat, stealthy, w_t=1.0, w_nt=1.0):
    """Cross-entropy of adversarial logits against the stealthy labels, weighted w_t on / w_nt off the mask."""
    if w_t < 0 or w_nt < 0:
        raise ValueError("adversarial_loss: weights must be non-negative")
    weights = np.where(stealthy.mask, w_t, w_nt).astype(l_hat.dtype)
    return T.cross_entropy_pixelwise(l_hat, stealthy.labels, weights)


def regularizer_loss(l_reg, y):
    return T.cross_entropy_pixelwise(l_reg, y)


def total_loss(adv, reg, lambda0):
    if lambda0 < 0:
        raise ValueError("lambda0 must be >= 0")
    if reg is None:
        return adv
    return T.add(adv, T.scale(reg, lambda0))


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------

def _batches(n, batch):
    for i in range(0, n, batch):
        yield slice(i, min(n, i + batch))


def clean_logits_labels(target, images, batch=32):
    """argmax predictions of ``target`` over an image array, no graph."""
    out = []
    with T.no_grad():
        for sl in _batches(len(images), batch):
            out.append(np.argmax(forward_target(target, Tensor(images[sl])).data, axis=1))
    return np.concatenate(out).astype(np.int64) if out else np.zeros((0,) + images.shape[2:], np.int64)


def precompute_stealthy(target, images, spec, batch=32):
    """Stealthy labels for every image (the target is frozen, so they never change)."""
    _, _, h, w = images.shape
    mask = None if spec.attack_type == VANISH else resolve_mask(spec.mask_source, h, w)
    labels, masks, vm, em = [], [], [], []
    with T.no_grad():
        for sl in _batches(len(images), batch):
            lx = forward_target(target, Tensor(images[sl]))
            s = stealthy_labels(lx, spec, mask)
            labels.append(s.labels)
            masks.append(s.mask)
            vm.append(s.vanish_mask)
            em.append(s.embed_mask)
    return StealthyLabels(np.concatenate(labels), np.concatenate(masks), np.concatenate(vm), np.concatenate(em))


def _check_frozen(target):
    if not target.frozen or any(p.requires_grad for p in target.params.values()):
        raise ValueError("target model must be frozen for attack training/evaluation")


def success_counts(adv_pred, clean_pred, stealthy, spec):
    """(manipulated_hits, n_target, preserved_hits, n_nontarget) under spec.success_mode."""
    mask = stealthy.mask
    if spec.success_mode == STRICT:
        ok = adv_pred == stealthy.labels
    elif spec.success_mode == VANISH_MODE:
        ok = ~np.isin(adv_pred, spec.target_classes)
    else:
        ok = adv_pred == spec.fake_class
    keep = adv_pred == clean_pred
    return int((ok & mask).sum()), int(mask.sum()), int((keep & ~mask).sum()), int((~mask).sum())


def generator_trainable(generator, cfg):
    names = [n for n in generator.params if cfg.regularizer_enabled or not n.startswith("reg_head.")]
    return {n: generator.params[n] for n in names}


def train_attack(generator, target, dataset, spec, cfg, progress=None):
    """Train ``generator`` in place against the frozen ``target``; return (generator, history).

    ``history`` has one dict per epoch with mean per-pixel losses and the
    running train-split manipulated/preserved rates.
    """
    _check_frozen(target)
    if generator.config.kind != GENERATOR_UNET:
        raise ValueError("train_attack needs a GeneratorUNet generator")
    ncls = target.config.num_classes
    if generator.config.num_classes != ncls or dataset.num_classes != ncls:
        raise ValueError(
            f"class-count mismatch: generator {generator.config.num_classes}, "
            f"target {ncls}, dataset {dataset.num_classes}"
        )
    spec.check_classes(ncls)
    use_reg = cfg.regularizer_enabled and "reg_head.weight" in generator.params

    images, labels = dataset.images, dataset.labels
    n = len(images)
    history = []
    if cfg.epochs == 0 or n == 0:
        return generator, history

    stealthy = precompute_stealthy(target, images, spec)
    rng = np.random.default_rng(cfg.seed)
    state = adam(cfg.lr)
    trainable = generator_trainable(generator, cfg)
    for p in trainable.values():
        p.requires_grad = True
        p.grad = None
    pixels_per_image = images.shape[2] * images.shape[3]

    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        order = rng.permutation(n)
        sums = {"adv": 0.0, "reg": 0.0, "total": 0.0}
        hits = np.zeros(4, dtype=np.int64)
        for sl in _batches(n, cfg.batch):
            idx = order[sl]
            x = Tensor(images[idx])
            batch_st = StealthyLabels(stealthy.labels[idx], stealthy.mask[idx])
            out = forward_generator(generator, x, with_regularizer=use_reg)
            p = scale_perturbation(out.raw_perturbation, cfg.xi)
            x_adv = apply_perturbation(x, p)
            l_hat = forward_target(target, x_adv)
            adv = adversarial_loss(l_hat, batch_st, cfg.target_weight, cfg.preserve_weight)
            reg = regularizer_loss(out.regularizer_logits, labels[idx]) if use_reg else None
            loss = total_loss(adv, reg, cfg.lambda0 if use_reg else 0.0)
            T.backward(loss)
            optimizer_step(state, trainable)

            adv_pred = np.argmax(l_hat.data, axis=1)
            # off the mask the stealthy label is the clean prediction
            hits += success_counts(adv_pred, batch_st.labels, batch_st, spec)
            sums["adv"] += adv.item()
            sums["reg"] += reg.item() if reg is not None else 0.0
            sums["total"] += loss.item()
        denom = n * pixels_per_image
        row = {
            "epoch": epoch,
            "adv_loss": sums["adv"] / denom,
            "reg_loss": sums["reg"] / denom,
            "total_loss": sums["total"] / denom,
            "manipulated_rate": hits[0] / hits[1] if hits[1] else None,
            "preserved_rate": hits[2] / hits[3] if hits[3] else None,
            "seconds": time.perf_counter() - t0,
        }
        history.append(row)
        log.info(
            "attack epoch %d adv=%.4f reg=%.4f manip=%s pres=%s (%.1fs)",
            epoch,
            row["adv_loss"],
            row["reg_loss"],
            _fmt(row["manipulated_rate"]),
            _fmt(row["preserved_rate"]),
            row["seconds"],
        )
        if progress is not None:
            progress(row)
    return generator, history


def _fmt(v):
    return "n/a" if v is None else f"{v:.4f}"


def pixel_accuracy(model, dataset, batch=32):
    if len(dataset) == 0:
        return float("nan")
    pred = clean_logits_labels(model, dataset.images, batch)
    return float((pred == dataset.labels).mean())


def pretrain_target(train, test, cfg, num_classes=None, progress=None):
    """Supervised pixelwise-CE training of a TargetFCN; return (frozen model, test pixel accuracy)."""
    num_classes = num_classes or train.num_classes
    mcfg = ModelConfig(
        kind="TargetFCN",
        num_classes=num_classes,
        base_width=cfg.base_width,
        width_multiplier=cfg.width_multiplier,
        seed=cfg.seed,
    )
    model = build_target_fcn(mcfg)
    rng = np.random.default_rng(cfg.seed + 1)
    state = adam(cfg.lr)
    n = len(train)
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        order = rng.permutation(n)
        total = 0.0
        for sl in _batches(n, cfg.batch):
            idx = order[sl]
            logits = forward_target(model, Tensor(train.images[idx]))
            loss = T.cross_entropy_pixelwise(logits, train.labels[idx])
            T.backward(loss)
            optimizer_step(state, model.params)
            total += loss.item()
        row = {"epoch": epoch, "loss": total / max(1, train.labels.size), "seconds": time.perf_counter() - t0}
        log.info("pretrain epoch %d loss=%.4f (%.1fs)", epoch, row["loss"], row["seconds"])
        if progress is not None:
            progress(row)
    model.freeze()
    return model, pixel_accuracy(model, test)
