import math
import zlib

import numpy as np
import pytest

from ssat import attack, nets, scenes
from ssat import tensor as T
from ssat.attack import AttackSpec, AttackTrainConfig, StealthyLabels
from ssat.gradcheck import numerical_grad
from ssat.pnm import encode_pgm
from ssat.tensor import Tensor

ROAD, CAR, PERSON, RIDER = scenes.ROAD, scenes.CAR, scenes.PERSON, scenes.RIDER


def pixel_logits(values, c=8):
    """One pixel of (1, c, 1, 1) logits from a {class: value} dict (others -10)."""
    out = np.full((1, c, 1, 1), -10.0)
    for k, v in values.items():
        out[0, k, 0, 0] = v
    return out


class TestSpec:
    def test_defaults(self):
        assert AttackSpec(attack.VANISH, [PERSON]).success_mode == attack.VANISH_MODE
        assert AttackSpec(attack.EMBED, fake_class=PERSON, mask_source={}).success_mode == attack.EMBED_MODE
        assert AttackSpec(attack.DISPLACE, [PERSON], CAR, {}).success_mode == attack.STRICT

    @pytest.mark.parametrize(
        "kwargs",
        [
            dict(attack_type=attack.VANISH),
            dict(attack_type=attack.EMBED, fake_class=PERSON),
            dict(attack_type=attack.EMBED, mask_source={}),
            dict(attack_type=attack.DISPLACE, target_classes=[PERSON], fake_class=PERSON, mask_source={}),
            dict(attack_type="Erase", target_classes=[PERSON]),
            dict(attack_type=attack.VANISH, target_classes=[PERSON], success_mode="Loose"),
        ],
    )
    def test_invalid(self, kwargs):
        with pytest.raises(ValueError):
            AttackSpec(**kwargs)

    def test_json_round_trip(self):
        spec = AttackSpec(attack.DISPLACE, [RIDER, PERSON], CAR, {"kind": "silhouette", "seed": 1, "count": 2})
        assert AttackSpec.from_dict(spec.to_dict()) == spec
        assert spec.target_classes == [PERSON, RIDER]

    def test_class_range(self):
        with pytest.raises(ValueError, match="outside"):
            AttackSpec(attack.VANISH, [9]).check_classes(8)

    def test_train_config_validation(self):
        for bad in (dict(xi=0), dict(lambda0=-1), dict(target_weight=-1), dict(batch=0)):
            with pytest.raises(ValueError):
                AttackTrainConfig(**bad)


class TestPerturbation:
    def test_zero_raw(self):
        assert np.all(attack.scale_perturbation(Tensor(np.zeros(4)), 10.0).data == 0)

    def test_saturation_bound(self):
        p = attack.scale_perturbation(Tensor([-1e6, 1e6]), 10.0).data
        assert np.all(np.abs(p) <= 10.0)

    def test_tanh_value(self):
        assert attack.scale_perturbation(Tensor(np.array([1.0])), 10.0).item() == pytest.approx(7.6159, abs=1e-4)

    def test_apply(self):
        img = Tensor([[250.0, 100.0, 3.0]])
        assert np.array_equal(attack.apply_perturbation(img, Tensor(np.zeros((1, 3)))).data, img.data)
        out = attack.apply_perturbation(img, Tensor([[10.0, -7.5, -9.0]])).data
        np.testing.assert_array_equal(out, [[255.0, 92.5, 0.0]])

    def test_apply_shape_mismatch(self):
        with pytest.raises(ValueError):
            attack.apply_perturbation(Tensor(np.zeros((1, 3))), Tensor(np.zeros((1, 2))))


class TestMappers:
    def test_vanish_second_choice(self):
        s = attack.map_vanish(pixel_logits({ROAD: 0.1, PERSON: 0.7, CAR: 0.2}), [PERSON])
        assert s.labels[0, 0, 0] == CAR and s.mask[0, 0, 0]

    def test_vanish_off_target(self):
        s = attack.map_vanish(pixel_logits({ROAD: 0.9, PERSON: 0.7}), [PERSON])
        assert s.labels[0, 0, 0] == ROAD and not s.mask[0, 0, 0]

    def test_vanish_excludes_all_targets(self):
        s = attack.map_vanish(pixel_logits({PERSON: 0.5, RIDER: 0.4, ROAD: 0.1}), [PERSON, RIDER])
        assert s.labels[0, 0, 0] == ROAD

    def test_vanish_all_classes_rejected(self):
        with pytest.raises(ValueError, match="no destination"):
            attack.map_vanish(np.zeros((1, 2, 1, 1)), [0, 1])

    def test_embed_empty_and_full(self):
        lx = np.random.default_rng(0).normal(size=(2, 8, 4, 4))
        clean = lx.argmax(1)
        empty = attack.map_embed(lx, np.zeros((4, 4), bool), PERSON)
        assert np.array_equal(empty.labels, clean) and not empty.mask.any()
        full = attack.map_embed(lx, np.ones((4, 4), bool), PERSON)
        assert np.all(full.labels == PERSON)

    def test_embed_silhouette_counts(self):
        # clean prediction is road everywhere; embed adds exactly the mask's pixels as person
        lx = np.zeros((1, 8, 64, 64))
        lx[:, ROAD] = 1.0
        mask = attack.silhouette_mask(64, 64, seed=0, count=1)
        s = attack.map_embed(lx, mask, PERSON)
        assert (s.labels == PERSON).sum() == mask.sum() > 0

    def test_embed_size_mismatch(self):
        with pytest.raises(ValueError):
            attack.map_embed(np.zeros((1, 8, 4, 4)), np.zeros((3, 4), bool), PERSON)

    def test_displace_empty_mask_is_vanish(self):
        lx = np.random.default_rng(1).normal(size=(2, 8, 6, 6))
        d = attack.map_displace(lx, [PERSON], np.zeros((6, 6), bool), CAR)
        v = attack.map_vanish(lx, [PERSON])
        assert np.array_equal(d.labels, v.labels) and np.array_equal(d.mask, v.mask)

    def test_displace_overlap_embed_wins(self):
        lx = pixel_logits({PERSON: 1.0, ROAD: 0.5})
        s = attack.map_displace(lx, [RIDER], np.ones((1, 1), bool), PERSON)
        assert s.labels[0, 0, 0] == PERSON and s.mask[0, 0, 0]
        lx = pixel_logits({RIDER: 1.0, ROAD: 0.5})
        s = attack.map_displace(lx, [RIDER], np.ones((1, 1), bool), CAR)
        assert s.labels[0, 0, 0] == CAR

    def test_stealthy_dispatch(self, tmp_path):
        mask = np.zeros((4, 4), np.uint8)
        mask[1:3, 1:3] = 255
        path = tmp_path / "m.pgm"
        path.write_bytes(encode_pgm(mask))
        lx = np.random.default_rng(2).normal(size=(1, 8, 4, 4))
        s = attack.stealthy_labels(lx, AttackSpec(attack.EMBED, fake_class=CAR, mask_source=str(path)))
        assert np.array_equal(s.mask[0], mask > 0)
        assert np.all(s.labels[0][mask > 0] == CAR)


class TestMasks:
    def test_silhouette_deterministic_and_located(self):
        a = attack.silhouette_mask(64, 64, seed=3, count=2)
        assert np.array_equal(a, attack.silhouette_mask(64, 64, seed=3, count=2))
        assert a.any() and not a[:20].any()

    def test_resolve_kinds(self, tmp_path):
        m = attack.resolve_mask({"kind": "silhouette", "seed": 0, "count": 1}, 32, 32)
        assert m.shape == (32, 32) and m.dtype == bool
        path = tmp_path / "m.pgm"
        path.write_bytes(encode_pgm(m.astype(np.uint8) * 255))
        assert np.array_equal(attack.resolve_mask({"kind": "pgm", "path": str(path)}, 32, 32), m)
        with pytest.raises(ValueError, match="size"):
            attack.resolve_mask(str(path), 16, 16)
        with pytest.raises(ValueError):
            attack.resolve_mask({"kind": "circle"}, 32, 32)


class TestLosses:
    def test_weighted_hand_value(self):
        # one target and one non-target pixel, uniform logits over 4 classes
        lx = Tensor(np.zeros((1, 4, 1, 2)))
        st = StealthyLabels(np.zeros((1, 1, 2), np.int64), np.array([[[True, False]]]))
        assert attack.adversarial_loss(lx, st, 2.0, 1.0).item() == pytest.approx(3 * math.log(4), abs=1e-12)

    def test_unit_weights_equal_plain_ce(self):
        rng = np.random.default_rng(0)
        lx = Tensor(rng.normal(size=(2, 5, 3, 3)))
        labels = rng.integers(0, 5, size=(2, 3, 3))
        st = StealthyLabels(labels, rng.random((2, 3, 3)) < 0.3)
        assert attack.adversarial_loss(lx, st).item() == pytest.approx(T.cross_entropy_pixelwise(lx, labels).item(), abs=1e-9)

    def test_zero_preserve_weight_ignores_off_mask(self):
        rng = np.random.default_rng(1)
        base = rng.normal(size=(1, 4, 2, 2))
        mask = np.array([[[True, False], [False, False]]])
        st = StealthyLabels(np.zeros((1, 2, 2), np.int64), mask)
        other = base.copy()
        other[:, :, 1, :] += rng.normal(size=(1, 4, 2))
        a = attack.adversarial_loss(Tensor(base), st, 1.0, 0.0).item()
        b = attack.adversarial_loss(Tensor(other), st, 1.0, 0.0).item()
        assert a == b

    def test_negative_weight(self):
        st = StealthyLabels(np.zeros((1, 1, 1), np.int64), np.ones((1, 1, 1), bool))
        with pytest.raises(ValueError):
            attack.adversarial_loss(Tensor(np.zeros((1, 2, 1, 1))), st, -1.0, 1.0)

    def test_regularizer_examples(self):
        y = np.array([[[0, 2]]])
        confident = np.full((1, 3, 1, 2), -20.0)
        confident[0, 0, 0, 0] = confident[0, 2, 0, 1] = 20.0
        assert attack.regularizer_loss(Tensor(confident), y).item() / 2 < 1e-6
        assert attack.regularizer_loss(Tensor(np.zeros((1, 3, 1, 2))), y).item() == pytest.approx(2 * math.log(3))
        hand = np.zeros((1, 2, 1, 2))
        hand[0, 0] = 2.0
        # two pixels of logits [2, 0], label 0: 2 * log(1 + e^-2)
        assert attack.regularizer_loss(Tensor(hand), np.zeros((1, 1, 2), int)).item() == pytest.approx(2 * math.log1p(math.exp(-2)))

    def test_total(self):
        assert attack.total_loss(Tensor(1.0), Tensor(2.0), 1e-2).item() == pytest.approx(1.02)
        assert attack.total_loss(Tensor(1.5), Tensor(2.0), 0.0).item() == 1.5
        with pytest.raises(ValueError):
            attack.total_loss(Tensor(1.0), Tensor(2.0), -1.0)

    def test_total_gradient_is_weighted_sum(self):
        rng = np.random.default_rng(2)
        gen = nets.cast_model(
            nets.build_generator_unet(nets.ModelConfig(kind=nets.GENERATOR_UNET, base_width=4, num_classes=3, seed=2)),
            np.float64,
        )
        x = Tensor(rng.uniform(0, 255, size=(1, 3, 8, 8)))
        y = rng.integers(0, 3, size=(1, 8, 8))
        r = rng.normal(size=(1, 3, 8, 8))

        def parts():
            out = nets.forward_generator(gen, x)
            adv = T.sum_all(T.mul(T.tanh(out.raw_perturbation), Tensor(r)))
            return adv, attack.regularizer_loss(out.regularizer_logits, y)

        grads = []
        for combine in (lambda a, b: a, lambda a, b: b, lambda a, b: attack.total_loss(a, b, 0.05)):
            gen.zero_grad()
            T.backward(combine(*parts()))
            grads.append(gen["enc0.weight"].grad.copy())
        np.testing.assert_allclose(grads[2], grads[0] + 0.05 * grads[1], rtol=1e-10, atol=1e-14)

        def f(w):
            params = dict(gen.params, **{"enc0.weight": w})
            out = nets.forward_generator(nets.Model(gen.config, params), x)
            adv = T.sum_all(T.mul(T.tanh(out.raw_perturbation), Tensor(r)))
            return attack.total_loss(adv, attack.regularizer_loss(out.regularizer_logits, y), 0.05)

        fd = numerical_grad(f, gen["enc0.weight"].data, eps=1e-5)
        np.testing.assert_allclose(grads[2], fd, rtol=1e-4, atol=1e-6)


def params_crc(model):
    crc = 0
    for k, p in model.params.items():
        crc = zlib.crc32(k.encode() + p.data.tobytes(), crc)
    return crc


@pytest.fixture(scope="module")
def tiny():
    cfg = scenes.SceneConfig(width=16, height=16, seed=4)
    train, test = scenes.in_memory_splits(cfg, 12, 4)
    target, _ = attack.pretrain_target(train, test, attack.PretrainConfig(epochs=1, base_width=4, seed=1))
    return train, target


def tiny_gen(**kw):
    return nets.build_generator_unet(nets.ModelConfig(kind=nets.GENERATOR_UNET, base_width=4, seed=3, **kw))


class TestTraining:
    SPEC = AttackSpec(attack.VANISH, [PERSON, RIDER])

    def test_zero_epochs_unchanged(self, tiny):
        train, target = tiny
        gen = tiny_gen()
        before = params_crc(gen)
        _, hist = attack.train_attack(gen, target, train, self.SPEC, AttackTrainConfig(epochs=0))
        assert hist == [] and params_crc(gen) == before

    def test_target_untouched_and_generator_moves(self, tiny):
        train, target = tiny
        gen = tiny_gen()
        t0, g0 = params_crc(target), params_crc(gen)
        _, hist = attack.train_attack(gen, target, train, self.SPEC, AttackTrainConfig(epochs=2, batch=4, lr=1e-3))
        assert params_crc(target) == t0
        assert params_crc(gen) != g0
        assert [h["epoch"] for h in hist] == [0, 1]
        for h in hist:
            assert set(h) >= {"adv_loss", "reg_loss", "total_loss", "manipulated_rate", "preserved_rate"}
            assert h["total_loss"] == pytest.approx(h["adv_loss"] + 1e-2 * h["reg_loss"], rel=1e-5)

    def test_deterministic(self, tiny):
        train, target = tiny
        runs = []
        for _ in range(2):
            gen = tiny_gen()
            attack.train_attack(gen, target, train, self.SPEC, AttackTrainConfig(epochs=1, batch=4, seed=9))
            runs.append(params_crc(gen))
        assert runs[0] == runs[1]

    def test_unfrozen_target_rejected(self, tiny):
        train, target = tiny
        loose = nets.copy_model(target).unfreeze()
        with pytest.raises(ValueError, match="frozen"):
            attack.train_attack(tiny_gen(), loose, train, self.SPEC, AttackTrainConfig(epochs=1))

    def test_class_mismatch_rejected(self, tiny):
        train, target = tiny
        with pytest.raises(ValueError, match="class"):
            attack.train_attack(tiny_gen(num_classes=5), target, train, self.SPEC, AttackTrainConfig(epochs=1))
        with pytest.raises(ValueError):
            attack.train_attack(tiny_gen(), target, train, AttackSpec(attack.VANISH, [8]), AttackTrainConfig(epochs=1))

    def test_regularizer_disabled_leaves_head(self, tiny):
        train, target = tiny
        gen = tiny_gen()
        head = gen["reg_head.weight"].data.copy()
        _, hist = attack.train_attack(
            gen, target, train, self.SPEC, AttackTrainConfig(epochs=1, batch=4, lambda0=0.0, regularizer_enabled=False)
        )
        assert np.array_equal(gen["reg_head.weight"].data, head)
        assert hist[0]["reg_loss"] == 0.0

    def test_bound_holds_after_training(self, tiny):
        train, target = tiny
        gen = tiny_gen()
        attack.train_attack(gen, target, train, self.SPEC, AttackTrainConfig(epochs=1, batch=4, lr=1e-2, xi=4.0))
        with T.no_grad():
            raw = nets.forward_generator(gen, Tensor(train.images)).raw_perturbation
            p = attack.scale_perturbation(raw, 4.0)
            x_adv = attack.apply_perturbation(Tensor(train.images), p)
        assert np.abs(p.data).max() <= 4.0
        assert x_adv.data.min() >= 0 and x_adv.data.max() <= 255


class TestPretrain:
    def test_same_seed_same_bytes(self):
        cfg = scenes.SceneConfig(width=16, height=16, seed=2)
        train, test = scenes.in_memory_splits(cfg, 6, 2)
        pc = attack.PretrainConfig(epochs=1, base_width=4, seed=5)
        a, acc_a = attack.pretrain_target(train, test, pc)
        b, acc_b = attack.pretrain_target(train, test, pc)
        assert params_crc(a) == params_crc(b) and acc_a == acc_b
        assert a.frozen
