"""Attack success metrics, experiment grids and report output."""

import csv
import hashlib
import io
import json
import zlib
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import tensor as T
from ._io import write_text_atomic
from .attack import (
    DISPLACE,
    EMBED_MODE,
    STRICT,
    VANISH_MODE,
    AttackTrainConfig,
    _batches,
    _check_frozen,
    apply_perturbation,
    resolve_mask,
    scale_perturbation,
    stealthy_labels,
    train_attack,
)
from .nets import build_generator_unet, count_params, forward_generator, forward_target
from .pnm import encode_ppm
from .tensor import Tensor

CSV_COLUMNS = (
    "experiment_id",
    "generator_ckpt",
    "target_ckpt",
    "dataset",
    "attack_type",
    "success_mode",
    "xi",
    "lambda0",
    "manipulated_rate",
    "preserved_rate",
    "n_target_px",
    "n_nontarget_px",
    "efficiency_ratio",
    "seed",
)

# Cityscapes-like colours for road, sidewalk, building, sky, car, person, rider, void
DEFAULT_PALETTE = (
    (128, 64, 128),
    (244, 35, 232),
    (70, 70, 70),
    (70, 130, 180),
    (0, 0, 142),
    (220, 20, 60),
    (255, 0, 0),
    (0, 0, 0),
)


# --------------------------------------------------------------------------
# pixel metrics
# --------------------------------------------------------------------------

def _success(adv_pred, stealthy, spec, mode=None):
    mode = mode or spec.success_mode
    if mode == STRICT:
        return adv_pred == stealthy.labels
    if mode == VANISH_MODE:
        return ~np.isin(adv_pred, spec.target_classes)
    if mode == EMBED_MODE:
        return adv_pred == spec.fake_class
    raise ValueError(f"unknown success mode {mode!r}")


def manipulated_rate(clean_pred, adv_pred, stealthy, spec, mode=None):
    """Fraction of masked pixels where the attack succeeded; None for an empty mask."""
    adv_pred = np.asarray(adv_pred)
    if adv_pred.shape != stealthy.mask.shape or np.shape(clean_pred) != adv_pred.shape:
        raise ValueError("manipulated_rate: prediction and mask shapes differ")
    n = int(stealthy.mask.sum())
    if n == 0:
        return None
    return int((_success(adv_pred, stealthy, spec, mode) & stealthy.mask).sum()) / n


def preserved_rate(clean_pred, adv_pred, mask):
    """Fraction of off-mask pixels whose adversarial prediction equals the clean one."""
    clean_pred, adv_pred, mask = np.asarray(clean_pred), np.asarray(adv_pred), np.asarray(mask, dtype=bool)
    if clean_pred.shape != adv_pred.shape or mask.shape != adv_pred.shape:
        raise ValueError("preserved_rate: shapes differ")
    off = ~mask
    n = int(off.sum())
    if n == 0:
        raise ValueError("preserved_rate: mask covers every pixel, nothing to preserve")
    return int(((adv_pred == clean_pred) & off).sum()) / n


# --------------------------------------------------------------------------
# reports
# --------------------------------------------------------------------------

@dataclass
class MetricsReport:
    manipulated_rate: float
    preserved_rate: float
    n_target_pixels: int
    n_nontarget_pixels: int
    manipulated_hits: int
    preserved_hits: int
    per_class_confusion: list
    success_mode: str
    attack_type: str
    xi: float
    config_fingerprint: str
    efficiency_ratio: float = None
    sub_rates: dict = field(default_factory=dict)
    experiment_id: str = ""
    generator_ckpt: str = ""
    target_ckpt: str = ""
    dataset: str = ""
    lambda0: float = None
    seed: int = None

    @property
    def overall_rate(self):
        """Pixel-weighted combination of manipulated and preserved hits."""
        n = self.n_target_pixels + self.n_nontarget_pixels
        return (self.manipulated_hits + self.preserved_hits) / n if n else None

    def to_dict(self):
        d = asdict(self)
        d["overall_rate"] = self.overall_rate
        return d

    def csv_row(self):
        def rate(v):
            return "" if v is None else f"{v:.4f}"

        def num(v):
            return "" if v is None else f"{v:g}"

        return {
            "experiment_id": self.experiment_id,
            "generator_ckpt": self.generator_ckpt,
            "target_ckpt": self.target_ckpt,
            "dataset": self.dataset,
            "attack_type": self.attack_type,
            "success_mode": self.success_mode,
            "xi": num(self.xi),
            "lambda0": num(self.lambda0),
            "manipulated_rate": rate(self.manipulated_rate),
            "preserved_rate": rate(self.preserved_rate),
            "n_target_px": str(self.n_target_pixels),
            "n_nontarget_px": str(self.n_nontarget_pixels),
            "efficiency_ratio": "" if self.efficiency_ratio is None else f"{self.efficiency_ratio:.4f}",
            "seed": "" if self.seed is None else str(self.seed),
        }


def _params_crc(model):
    crc = 0
    for name, p in model.params.items():
        crc = zlib.crc32(name.encode(), crc)
        crc = zlib.crc32(np.ascontiguousarray(p.data, dtype="<f4").tobytes(), crc)
    return f"{crc & 0xFFFFFFFF:08x}"


def fingerprint(generator, target, dataset, spec, xi):
    blob = json.dumps(
        {
            "generator": [generator.config.to_dict(), _params_crc(generator)],
            "target": [target.config.to_dict(), _params_crc(target)],
            "dataset": dataset.fingerprint,
            "spec": spec.to_dict(),
            "xi": xi,
        },
        sort_keys=True,
        default=str,
    )
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def attack_batch(generator, target, images, xi):
    """(perturbation, adversarial image, adversarial logits) arrays for one batch, no graph."""
    with T.no_grad():
        x = Tensor(images)
        p = scale_perturbation(forward_generator(generator, x, with_regularizer=False).raw_perturbation, xi)
        x_adv = apply_perturbation(x, p)
        l_hat = forward_target(target, x_adv)
    return p.data, x_adv.data, l_hat.data


def efficiency_ratio(generator, target):
    """Parameter-count ratio attack/target; accepts models or raw counts."""
    g = generator if isinstance(generator, (int, float)) else count_params(generator)
    t = target if isinstance(target, (int, float)) else count_params(target)
    return g / t


def format_ratio(r):
    return f"{r:.3f}"


def evaluate_attack(generator, target, dataset, spec, xi, batch=32, **meta):
    """Run the attack over a split without updating anything; micro-averaged report."""
    _check_frozen(target)
    ncls = target.config.num_classes
    if generator.config.num_classes != ncls or dataset.num_classes != ncls:
        raise ValueError(
            f"class-count mismatch: generator {generator.config.num_classes}, "
            f"target {ncls}, dataset {dataset.num_classes}"
        )
    spec.check_classes(ncls)
    _, _, h, w = dataset.images.shape
    mask = None if spec.attack_type == "Vanish" else resolve_mask(spec.mask_source, h, w)
    confusion = np.zeros((ncls, ncls), dtype=np.int64)
    m_hits = m_tot = p_hits = p_tot = 0
    sub = {"vanish": [0, 0], "embed": [0, 0]}
    for sl in _batches(len(dataset), batch):
        images = dataset.images[sl]
        with T.no_grad():
            l_x = forward_target(target, Tensor(images)).data
        st = stealthy_labels(l_x, spec, mask)
        clean = np.argmax(l_x, axis=1)
        _, _, l_hat = attack_batch(generator, target, images, xi)
        adv = np.argmax(l_hat, axis=1)
        ok = _success(adv, st, spec)
        m_hits += int((ok & st.mask).sum())
        m_tot += int(st.mask.sum())
        keep = (adv == clean) & ~st.mask
        p_hits += int(keep.sum())
        p_tot += int((~st.mask).sum())
        confusion += np.bincount(clean.ravel() * ncls + adv.ravel(), minlength=ncls * ncls).reshape(ncls, ncls)
        if spec.attack_type == DISPLACE:
            exact = adv == st.labels
            vm = st.vanish_mask & ~st.embed_mask
            sub["vanish"][0] += int((exact & vm).sum())
            sub["vanish"][1] += int(vm.sum())
            sub["embed"][0] += int((exact & st.embed_mask).sum())
            sub["embed"][1] += int(st.embed_mask.sum())
    sub_rates = {}
    if spec.attack_type == DISPLACE:
        sub_rates = {k: (a / b if b else None) for k, (a, b) in sub.items()}
    return MetricsReport(
        manipulated_rate=m_hits / m_tot if m_tot else None,
        preserved_rate=p_hits / p_tot if p_tot else None,
        n_target_pixels=m_tot,
        n_nontarget_pixels=p_tot,
        manipulated_hits=m_hits,
        preserved_hits=p_hits,
        per_class_confusion=confusion.tolist(),
        success_mode=spec.success_mode,
        attack_type=spec.attack_type,
        xi=float(xi),
        config_fingerprint=fingerprint(generator, target, dataset, spec, xi),
        efficiency_ratio=efficiency_ratio(generator, target),
        sub_rates=sub_rates,
        dataset=meta.pop("dataset", dataset.name),
        **meta,
    )


# --------------------------------------------------------------------------
# grids and sweeps
# --------------------------------------------------------------------------

@dataclass
class ExperimentGrid:
    """Named generators x named (target, dataset) pairs x xi values.

    ``generators`` is a list of ``(name, Model)``; ``targets`` a list of
    ``(name, Model, SceneDataset)`` where the dataset is the split the
    target is evaluated on.
    """

    generators: list
    targets: list
    xis: list
    spec: object
    seed: int = 0
    lambda0: float = None
    reports: list = field(default_factory=list)


@dataclass
class CellFailure:
    generator: str
    target: str
    xi: float
    error: str


def cross_evaluate(grid, batch=32):
    """Evaluate every generator against every target; return ``{(gen, target, xi): report}``.

    A failing cell is recorded as a CellFailure and the grid carries on.
    """
    results = {}
    for gname, gen in grid.generators:
        for tname, target, data in grid.targets:
            for xi in grid.xis:
                try:
                    rep = evaluate_attack(
                        gen,
                        target,
                        data,
                        grid.spec,
                        xi,
                        batch=batch,
                        experiment_id=f"{gname}->{tname}@xi={xi:g}",
                        generator_ckpt=gname,
                        target_ckpt=tname,
                        lambda0=grid.lambda0,
                        seed=grid.seed,
                    )
                except (ValueError, RuntimeError) as e:
                    rep = CellFailure(gname, tname, xi, str(e))
                results[(gname, tname, xi)] = rep
    grid.reports = [results[k] for k in sorted(results, key=lambda k: (k[0], k[1], k[2]))]
    return results


def square_table(results, field_name="manipulated_rate", xi=None):
    """Rows = generators, columns = targets, for one xi."""
    gens = sorted({k[0] for k in results})
    tgts = sorted({k[1] for k in results})
    xis = sorted({k[2] for k in results})
    xi = xis[0] if xi is None else xi
    table = []
    for g in gens:
        row = []
        for t in tgts:
            rep = results.get((g, t, xi))
            row.append(None if rep is None or isinstance(rep, CellFailure) else getattr(rep, field_name))
        table.append(row)
    return gens, tgts, table


@dataclass
class AttackRecipe:
    """Everything needed to train and score one generator."""

    generator_config: object
    target: object
    train: object
    test: object
    spec: object
    train_config: AttackTrainConfig
    name: str = "recipe"


def run_recipe(recipe, **overrides):
    """Train a fresh generator from ``recipe`` (fields of its train config overridable) and evaluate it."""
    tcfg = replace(recipe.train_config, **{k: v for k, v in overrides.items() if k in AttackTrainConfig.__dataclass_fields__})
    gcfg = recipe.generator_config
    if "width_multiplier" in overrides:
        gcfg = replace(gcfg, width_multiplier=overrides["width_multiplier"])
    gen = build_generator_unet(gcfg)
    gen, history = train_attack(gen, recipe.target, recipe.train, recipe.spec, tcfg)
    report = evaluate_attack(
        gen,
        recipe.target,
        recipe.test,
        recipe.spec,
        tcfg.xi,
        experiment_id=recipe.name,
        lambda0=tcfg.lambda0,
        seed=tcfg.seed,
    )
    return gen, history, report


def sweep_xi(recipe, xis):
    """Train and evaluate one attack per xi with the recipe's seed; list of (xi, report, generator)."""
    xis = [float(x) for x in xis]
    if any(x <= 0 for x in xis) or xis != sorted(xis):
        raise ValueError("xis must be positive and ascending")
    rows = []
    for xi in xis:
        gen, _, rep = run_recipe(replace(recipe, name=f"{recipe.name}/xi={xi:g}"), xi=xi)
        rows.append((xi, rep, gen))
    return rows


def sweep_width(recipe, multipliers=(1.0, 0.5, 0.25)):
    rows = []
    for m in multipliers:
        gen, _, rep = run_recipe(replace(recipe, name=f"{recipe.name}/width={m:g}"), width_multiplier=m)
        rows.append((m, rep, gen))
    return rows


# --------------------------------------------------------------------------
# rendering and CSV
# --------------------------------------------------------------------------

def render_labelmap(labels, palette=DEFAULT_PALETTE):
    """P6 bytes with one pixel per label coloured by ``palette``."""
    pal = np.asarray(palette, dtype=np.int64)
    if pal.ndim != 2 or pal.shape[1] != 3 or pal.min() < 0 or pal.max() > 255:
        raise ValueError("palette must be a list of RGB triples in [0, 255]")
    labels = np.asarray(labels)
    if labels.ndim != 2:
        raise ValueError(f"labels must be (h, w), got {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= len(pal)):
        raise ValueError(f"label {int(labels.max())} outside palette of {len(pal)} colours")
    return encode_ppm(pal[labels].astype(np.uint8))


def image_to_ppm(image):
    """(3, h, w) float image in [0, 255] -> P6 bytes."""
    return encode_ppm(np.clip(np.rint(image), 0, 255).astype(np.uint8).transpose(1, 2, 0))


def perturbation_to_ppm(p, xi):
    """Perturbation stretched from [-xi, xi] to [0, 255] for display."""
    return image_to_ppm(127.5 + np.asarray(p) * (127.5 / xi))


def reports_csv_text(reports):
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for rep in reports:
        writer.writerow(rep.csv_row())
    return buf.getvalue()


def write_report_csv(reports, path):
    write_text_atomic(path, reports_csv_text(reports))
