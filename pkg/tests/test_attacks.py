import numpy as np
import pytest
import torch

from conftest import linear_net, mlp
from hsplid.attacks import (
    AttackError,
    AttackSpec,
    CorruptionSpec,
    aggregate,
    allowed_region,
    corrupt,
    pgd,
    pgd_batch,
    probe_nonsalient,
    read_eval_csv,
    robust_accuracy,
    write_eval_csv,
)
from hsplid.datasets import ImageSet, build_synthetic_shapes, right_region_mask
from hsplid.decomposition import SaliencyMask
from hsplid.models import ArchitectureSpec, build_model, input_gradient, predict


@pytest.fixture(scope="module")
def split():
    return build_synthetic_shapes(10, k=4, seed=5)


@pytest.fixture(scope="module")
def cnn(split):
    return build_model(ArchitectureSpec("lenet3", (1, 64, 64), 32, 4), seed=0)


class TestPgd:
    def test_eps_zero_identity(self, cnn, split):
        adv = pgd(cnn, split.test, AttackSpec(epsilon=0.0))
        assert np.array_equal(adv, split.test.images)

    def test_zero_region_identity(self, cnn, split):
        s = split.test
        zero = np.zeros_like(s.region_masks)
        adv = pgd(cnn, s.images, AttackSpec(epsilon=0.5), labels=s.labels, region_masks=zero)
        assert np.array_equal(adv, s.images)

    def test_single_sample(self, cnn, split):
        out = pgd(cnn, split.test[0], AttackSpec(epsilon=0.1))
        assert out.shape == (1, 64, 64)

    @pytest.mark.parametrize("region", ["full", "mask", "random_block"])
    def test_support_and_box(self, cnn, split, region):
        s = split.test
        spec = AttackSpec(epsilon=0.3, region=region, seed=2)
        res = pgd_batch(cnn, s.images, s.labels, s.region_masks, spec, check=True)
        assert np.abs(res.delta).max() <= 0.3
        assert not res.delta[:, 0][res.allowed == 0].any()
        outside = np.broadcast_to(res.allowed[:, None] == 0, s.images.shape)
        assert np.array_equal(res.images[outside], s.images[outside])
        assert np.abs(res.images.astype(np.float64) - s.images).max() <= 0.3 + 1e-7
        assert res.images.min() >= 0 and res.images.max() <= 1

    def test_linear_fgsm_oracle(self, rng):
        # one step, no random start, alpha >= eps: delta = eps * sign(masked gradient)
        d = 16
        W = rng.normal(size=(3, d))
        net = linear_net(W)
        net.input_shape  # None: flat inputs
        x = rng.uniform(0.3, 0.7, size=(6, 1, 4, 4))
        y = rng.integers(0, 3, 6)
        region = (rng.uniform(size=(6, 4, 4)) > 0.5).astype(np.uint8)
        eps = 0.05
        res = pgd_batch(net, x, y, region, AttackSpec(epsilon=eps, alpha=0.1, iters=1, region="mask",
                                                      random_start=False))
        g = input_gradient(net, torch.as_tensor(x), "loss", y).numpy()
        expected = eps * np.sign(g) * region[:, None]
        assert np.array_equal(res.delta, expected)

    def test_attack_lowers_accuracy(self, split):
        s = split.test
        net = mlp(input_shape=(1, 64, 64), latent=8, k=4, activation="relu", dtype=torch.float32)
        clean = (predict(net, s.images) == s.labels).mean()
        r = robust_accuracy(net, s, AttackSpec(epsilon=0.5, region="full"), (0,))
        assert r.mean <= clean

    def test_shape_mismatch(self, cnn, split):
        s = split.test
        with pytest.raises(AttackError, match="shape mismatch"):
            pgd_batch(cnn, s.images, s.labels, s.region_masks[:, :10], AttackSpec(epsilon=0.1))

    def test_spec_validation(self):
        for bad in (dict(epsilon=-1), dict(iters=0), dict(region="left"), dict(block_fraction=0)):
            with pytest.raises(AttackError):
                AttackSpec(**bad)


class TestRegions:
    def test_block_inside_mask(self):
        masks = np.broadcast_to(right_region_mask(), (20, 64, 64))
        blocks = allowed_region(masks, "random_block", 0.25, seed=1)
        assert all(b.sum() == 16 * 16 for b in blocks)
        assert not (blocks * (1 - masks)).any()
        assert np.array_equal(blocks, allowed_region(masks, "random_block", 0.25, seed=1))

    def test_block_placement_failure(self):
        tiny = np.zeros((1, 64, 64), np.uint8)
        tiny[0, :4, :4] = 1
        with pytest.raises(AttackError, match="1000"):
            allowed_region(tiny, "random_block", 0.25)


class TestCorruptions:
    @pytest.mark.parametrize("kind", ["brightness", "defocus", "occlusion"])
    def test_outside_region_unchanged(self, split, kind):
        s = split.test
        out = corrupt(s, CorruptionSpec(kind, 5, seed=3))
        keep = np.broadcast_to(s.region_masks[:, None] == 0, s.images.shape)
        assert np.array_equal(out[keep], s.images[keep])
        assert not np.array_equal(out, s.images)

    def test_brightness_arithmetic(self):
        s = ImageSet(np.full((1, 1, 8, 8), 0.5, np.float32), np.zeros(1, np.int64), np.ones((1, 8, 8), np.uint8))
        assert np.all(corrupt(s, CorruptionSpec("brightness", 5, region="full")) == 1.0)
        assert np.allclose(corrupt(s, CorruptionSpec("brightness", 2, region="full")), 0.7)

    def test_defocus_box_blur(self):
        img = np.zeros((1, 1, 9, 9), np.float32)
        img[0, 0, 4, 4] = 1.0
        s = ImageSet(img, np.zeros(1, np.int64), np.ones((1, 9, 9), np.uint8))
        out = corrupt(s, CorruptionSpec("defocus", 1, region="full"))[0, 0]
        assert np.allclose(out[3:6, 3:6], 1 / 9) and out[2, 2] == 0

    def test_occlusion_deterministic(self, split):
        spec = CorruptionSpec("occlusion", 3, seed=9)
        a, b = corrupt(split.test, spec), corrupt(split.test, spec)
        assert np.array_equal(a, b)
        changed = (a != split.test.images)
        assert changed.any()

    def test_severity_bounds(self):
        with pytest.raises(AttackError):
            CorruptionSpec("brightness", 6)


class TestRobustAccuracy:
    def test_eps_zero_equals_clean(self, cnn, split):
        r = robust_accuracy(cnn, split, AttackSpec(epsilon=0.0), (0, 1, 2))
        clean = float((predict(cnn, split.test.images) == split.test.labels).mean())
        assert r.mean == clean and r.std == 0.0

    def test_chance_level_untrained(self):
        d = build_synthetic_shapes(100, k=10, seed=0)
        accs = []
        for seed in range(5):
            net = build_model(ArchitectureSpec("mlp_small", (1, 64, 64), 16, 10), seed=seed)
            accs.append(robust_accuracy(net, d, AttackSpec(epsilon=0.0), (0,)).mean)
        assert abs(np.mean(accs) - 0.10) <= 0.05

    def test_population_std(self, cnn, split):
        r = robust_accuracy(cnn, split, AttackSpec(epsilon=0.3, region="full"), (0, 1, 2))
        assert r.std == pytest.approx(np.std(list(r.per_seed.values())), abs=1e-15)

    def test_empty(self, cnn, split):
        with pytest.raises(AttackError, match="empty"):
            robust_accuracy(cnn, split.test.subset(np.array([], dtype=int)), AttackSpec())

    def test_csv_roundtrip(self, cnn, split, tmp_path):
        res = [robust_accuracy(cnn, split, AttackSpec(epsilon=e), (0, 1)) for e in (0.0, 0.2)]
        write_eval_csv(tmp_path / "e.csv", res)
        rows = read_eval_csv(tmp_path / "e.csv")
        assert (tmp_path / "e.csv").read_text().splitlines()[0] == "attack,region,epsilon,seed,accuracy"
        agg = aggregate(rows)
        assert [a["epsilon"] for a in agg] == [0.0, 0.2] and agg[1]["mean"] == res[1].mean


class TestProbe:
    def test_full_mask_degenerate(self, cnn, split):
        r = probe_nonsalient(cnn, SaliencyMask.ones(32), split)
        assert r.degenerate and r.accuracy == 0.25

    def test_salient_diagnostic(self, split):
        net = build_model(ArchitectureSpec("mlp_small", (1, 64, 64), 16, 4), seed=0)
        mask = SaliencyMask(np.r_[np.ones(8), np.zeros(8)])
        r = probe_nonsalient(net, mask, split, subspace="salient")
        assert not r.degenerate and 0 <= r.accuracy <= 1

    def test_binarized_option(self, cnn, split):
        r = probe_nonsalient(cnn, SaliencyMask(np.full(32, 0.9)), split, binarized=True)
        assert r.degenerate
