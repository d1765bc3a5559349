import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from stroketriage.backbones import ConfigError, build_backbone, load_external_backbone, replace_head, toy_config
from stroketriage.data import stratified_split
from stroketriage.train import (
    NumericError,
    TrainConfig,
    TrainingError,
    apply_freeze,
    count_parameters,
    fit,
    read_history,
    softmax,
    weighted_cross_entropy,
)

finite = st.floats(-50, 50, allow_nan=False)


@pytest.fixture(scope="module")
def small_split(small_corpus):
    return stratified_split(small_corpus, 0.75, 0)


def small_vit(seed=0, **kw):
    return replace_head(build_backbone(toy_config("vit", image_side=32, embed_dim=32, **kw), seed=seed))


def small_cfg(**kw):
    base = dict(learning_rate=1e-3, batch_size=8, epochs=2, dropout=0.0)
    return TrainConfig(**{**base, **kw})


class TestSoftmax:
    def test_examples(self):
        np.testing.assert_allclose(softmax([0, 0, 0]), [1 / 3] * 3, atol=1e-15)
        np.testing.assert_allclose(softmax([math.log(2), 0, 0]), [0.5, 0.25, 0.25], atol=1e-15)
        p = softmax([1000, 0, 0])
        assert np.all(np.isfinite(p)) and p[0] == pytest.approx(1.0)

    def test_non_finite(self):
        with pytest.raises(NumericError):
            softmax([np.inf, 0, 0])
        with pytest.raises(NumericError):
            softmax([np.nan, 0, 0])

    @given(st.lists(finite, min_size=1, max_size=8), st.floats(-1e3, 1e3))
    def test_sum_and_shift(self, logits, c):
        p = softmax(logits)
        assert abs(p.sum() - 1) <= 1e-9
        assert np.max(np.abs(softmax(np.asarray(logits) + c) - p)) <= 1e-9


class TestLoss:
    def test_examples(self):
        for y in range(3):
            assert weighted_cross_entropy([0, 0, 0], y, [1, 1, 1]) == pytest.approx(math.log(3), abs=1e-6)
        assert weighted_cross_entropy([math.log(2), 0, 0], 0, [2, 1, 1]) == pytest.approx(1.386294, abs=1e-6)
        assert weighted_cross_entropy([800, 0, 0], 0, [1, 1, 1]) == pytest.approx(0.0, abs=1e-300)

    @given(st.lists(st.tuples(finite, finite, finite), min_size=1, max_size=10), st.data())
    def test_unit_weights_equal_plain_ce(self, rows, data):
        logits = np.array(rows)
        labels = data.draw(st.lists(st.integers(0, 2), min_size=len(rows), max_size=len(rows)))
        plain = float(np.mean([-np.log(softmax(l)[y]) if softmax(l)[y] > 0 else np.inf for l, y in zip(logits, labels)]))
        got = weighted_cross_entropy(logits, labels, [1, 1, 1])
        if np.isfinite(plain):
            assert got == pytest.approx(plain, rel=1e-9, abs=1e-12)
        assert got >= 0

    def test_bad_label(self):
        with pytest.raises(ValueError):
            weighted_cross_entropy([0, 0, 0], 3, [1, 1, 1])


class TestHead:
    def test_counts(self):
        m = replace_head(build_backbone(toy_config("vit", embed_dim=128, heads=4), seed=0))
        assert count_parameters(m.head) == 387
        total = count_parameters(m)
        replace_head(m)
        assert count_parameters(m) == total
        apply_freeze(m, "head_only")
        assert count_parameters(m, trainable_only=True) == 387
        apply_freeze(m, "full")
        assert count_parameters(m, trainable_only=True) == total

    def test_zero_head_uniform(self):
        m = replace_head(build_backbone(toy_config("convnext"), seed=0), zero_init=True).eval()
        p = torch.softmax(m(torch.rand(3, 3, 64, 64)), -1)
        assert torch.allclose(p, torch.full_like(p, 1 / 3))

    def test_freeze_requires_head(self):
        with pytest.raises(TrainingError):
            apply_freeze(build_backbone(toy_config("vit")), "full")

    def test_no_feature_dim(self):
        m = build_backbone(toy_config("vit"))
        m.feature_dim = None
        with pytest.raises(ConfigError):
            replace_head(m)


class TestConfig:
    @pytest.mark.parametrize("kw", [
        dict(optimizer="madam"), dict(learning_rate=-1), dict(epochs=0), dict(batch_size=0),
        dict(freeze_mode="partial"), dict(augmentation="mixup"), dict(dtype="float16"),
    ])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            TrainConfig(**kw)

    def test_round_trip(self):
        cfg = TrainConfig(augmentation="classical+cgan", policy={"crop_scale_range": [0.7, 0.9], "hflip_prob": 0.2})
        assert TrainConfig.from_dict(cfg.to_dict()) == cfg
        assert cfg.classical and cfg.uses_cgan


class TestFit:
    def test_head_only_freezes_backbone(self, small_split):
        train, test = small_split
        m = small_vit()
        before = {n: p.detach().clone() for n, p in m.backbone_parameters()}
        head_before = m.head.weight.detach().clone()
        fit(train, test, m, small_cfg(freeze_mode="head_only"))
        for n, p in m.backbone_parameters():
            assert torch.equal(p, before[n]), n
        assert not torch.equal(m.head.weight, head_before)

    def test_zero_lr(self, small_split):
        train, test = small_split
        m = small_vit()
        before = {n: p.detach().clone() for n, p in m.named_parameters()}
        st = fit(train, test, m, small_cfg(learning_rate=0.0, epochs=3, dtype="float64"))
        for n, p in m.named_parameters():
            assert torch.equal(p, before[n].double()), n
        losses = [r.train_loss for r in st.history]
        assert max(losses) - min(losses) <= 1e-9

    def test_deterministic_and_checkpoint(self, small_split, tmp_path):
        train, test = small_split
        cfg = small_cfg(augmentation="classical", dropout=0.1, seed=4)
        a = fit(train, test, small_vit(), cfg, out_dir=tmp_path)
        b = fit(train, test, small_vit(), cfg)
        assert a.history == b.history
        assert [r.epoch for r in a.history] == [1, 2]
        assert read_history(tmp_path / "history.csv") == a.history
        back = load_external_backbone("vit", tmp_path / "best.safetensors")
        for k, v in a.best_state.items():
            assert torch.equal(back.state_dict()[k], v)

    def test_overlap_rejected(self, small_split):
        train, _ = small_split
        with pytest.raises(TrainingError, match="overlap"):
            fit(train, train, small_vit(), small_cfg())

    def test_requires_head(self, small_split):
        train, test = small_split
        with pytest.raises(TrainingError):
            fit(train, test, build_backbone(toy_config("vit", image_side=32)), small_cfg())
