import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from conftest import assert_grad_close, numeric_grad
from posefree3d.discriminator import (
    DiscVariant,
    Discriminator,
    DiscriminatorOutput,
    KIND_ENSEMBLE,
    KIND_IMPLICIT,
    KIND_REGRESSION,
)
from posefree3d.errors import ConfigurationError, ContractViolation
from posefree3d.generator import TriPlaneGenerator
from posefree3d.geometry import CameraPose, PoseDistribution, UniformLaw, FixedLaw, sample_distinct_poses
from posefree3d.objectives import (
    ContrastBatch,
    LossWeights,
    build_contrast_batch,
    contrastive_loss,
    cosine_similarity,
    discriminator_loss,
    generator_loss,
    info_nce,
    paired_info_nce,
    pose_regression_loss,
    r1_penalty,
    softplus_gan_f,
    total_objective,
)
from posefree3d.renderer import RenderConfig
from posefree3d.superres import ImagePair, SuperResolver


# ----------------------------------------------------------------------------
# scalar brute-force oracle for the contrastive loss


def cos_oracle(u, v):
    nu = math.sqrt(sum(x * x for x in u))
    nv = math.sqrt(sum(x * x for x in v))
    return sum(a * b for a, b in zip(u, v)) / (nu * nv)


def nce_oracle(v_a, v_pos, v_negs, tau):
    num = math.exp(cos_oracle(v_a, v_pos) / tau)
    den = num + sum(math.exp(cos_oracle(v_a, n) / tau) for n in v_negs)
    return -math.log(num / den)


def unit(vec):
    t = torch.tensor(vec, dtype=torch.float64)
    return t / t.norm()


class TestGanF:
    def test_value_at_zero(self):
        u = torch.tensor(0.0, dtype=torch.float64)
        assert softplus_gan_f(u).item() == pytest.approx(-math.log(2.0), abs=1e-12)

    @pytest.mark.parametrize("u", [-5.0, 0.3, 12.0])
    def test_algebraic_identity(self, u):
        t = torch.tensor(u, dtype=torch.float64)
        lhs = softplus_gan_f(t) - softplus_gan_f(-t)
        assert lhs.item() == pytest.approx(u, abs=1e-9)

    def test_stable_at_large_argument(self):
        v = softplus_gan_f(torch.tensor(50.0, dtype=torch.float64)).item()
        assert -1e-20 < v <= 0.0

    @given(st.floats(-1e6, 1e6))
    @settings(max_examples=50, deadline=None)
    def test_finite_and_nonpositive(self, u):
        v = softplus_gan_f(torch.tensor(u, dtype=torch.float64)).item()
        assert math.isfinite(v) and v <= 0.0


class _ConstantDisc:
    def __call__(self, pair, condition_pose=None):
        b = pair.high.shape[0]
        return DiscriminatorOutput(logit=torch.ones(b))


class _LinearDisc:
    def __init__(self, k):
        self.k = k

    def __call__(self, pair, condition_pose=None):
        s = pair.high.flatten(1).sum(1) + pair.low_upsampled.flatten(1).sum(1)
        return DiscriminatorOutput(logit=self.k * s)


class TestR1:
    def test_constant_discriminator_zero_penalty(self):
        pair = ImagePair(torch.rand(2, 3, 4, 4), torch.rand(2, 3, 4, 4))
        assert r1_penalty(_ConstantDisc(), pair).item() == 0.0

    def test_linear_discriminator_closed_form(self):
        k = 0.37
        pair = ImagePair(torch.rand(3, 3, 5, 5), torch.rand(3, 3, 5, 5))
        n_pixels = 2 * 3 * 5 * 5
        pen = r1_penalty(_LinearDisc(k), pair).item()
        assert pen == pytest.approx(k * k * n_pixels, rel=1e-5)

    def test_nonnegative_on_random_inputs(self):
        torch.manual_seed(0)
        disc = Discriminator(DiscVariant(KIND_IMPLICIT), resolution=16)
        for seed in range(100):
            g = torch.Generator().manual_seed(seed)
            pair = ImagePair(
                torch.rand(1, 3, 16, 16, generator=g) * 2 - 1,
                torch.rand(1, 3, 16, 16, generator=g) * 2 - 1,
            )
            assert r1_penalty(disc, pair).item() >= 0.0


class TestPoseRegression:
    def test_exact_estimate_is_zero(self):
        c = torch.tensor([[0.5, 1.5]])
        assert pose_regression_loss(c, c).item() == 0.0

    def test_l1_direct_sum(self):
        est = torch.tensor([[0.1, 0.2]])
        tgt = torch.zeros(1, 2)
        assert pose_regression_loss(est, tgt, "l1").item() == pytest.approx(0.3, abs=1e-7)

    def test_l2_value(self):
        est = torch.tensor([[0.1, 0.2]], dtype=torch.float64)
        tgt = torch.zeros(1, 2, dtype=torch.float64)
        assert pose_regression_loss(est, tgt, "l2").item() == pytest.approx(
            math.sqrt(0.05), abs=1e-12
        )

    def test_batch_mean(self):
        est = torch.tensor([[1.0, 0.0], [0.0, 2.0]])
        tgt = torch.zeros(2, 2)
        assert pose_regression_loss(est, tgt, "l2").item() == pytest.approx(1.5)

    def test_gradient_matches_finite_differences(self):
        torch.manual_seed(1)
        est = torch.randn(3, 2, dtype=torch.float64)
        tgt = torch.randn(3, 2, dtype=torch.float64)
        for norm in ("l1", "l2"):
            leaf = est.clone().requires_grad_(True)
            pose_regression_loss(leaf, tgt, norm).backward()
            numeric = numeric_grad(lambda: pose_regression_loss(est, tgt, norm), est)
            assert_grad_close(leaf.grad, numeric, rel=1e-4)


class TestCosine:
    def test_identity(self):
        u = torch.tensor([0.3, -2.0, 1.0])
        assert cosine_similarity(u, u).item() == pytest.approx(1.0, abs=1e-6)

    def test_antipodal(self):
        u = torch.tensor([0.3, -2.0, 1.0])
        assert cosine_similarity(u, -u).item() == pytest.approx(-1.0, abs=1e-6)

    def test_orthogonal(self):
        assert cosine_similarity(torch.tensor([1.0, 0.0]), torch.tensor([0.0, 1.0])).item() == 0.0

    def test_zero_vector_guard(self):
        v = cosine_similarity(torch.zeros(3), torch.ones(3))
        assert bool(torch.isfinite(v).all())


class TestInfoNCE:
    def test_symmetric_single_negative(self):
        v = unit([1.0, 0.0])
        loss = info_nce(v, v, v[None], tau=0.5)
        assert loss.item() == pytest.approx(math.log(2.0), abs=1e-12)

    @pytest.mark.parametrize("s", [1, 2, 3, 5])
    def test_symmetric_many_negatives(self, s):
        v = unit([0.6, 0.8])
        negs = v[None].expand(s, 2)
        loss = info_nce(v, v, negs, tau=0.25)
        assert loss.item() == pytest.approx(math.log(s + 1.0), abs=1e-12)

    def test_prescribed_similarities_case(self):
        # d(a,+) = 0.9, negatives at 0.1 and -0.3, tau = 0.25
        def at_angle(c):
            return torch.tensor([c, math.sqrt(1 - c * c)], dtype=torch.float64)

        a = torch.tensor([1.0, 0.0], dtype=torch.float64)
        pos = at_angle(0.9)
        negs = torch.stack([at_angle(0.1), at_angle(-0.3)])
        expected = nce_oracle(a.tolist(), pos.tolist(), negs.tolist(), 0.25)
        loss = info_nce(a, pos, negs, tau=0.25)
        assert loss.item() == pytest.approx(expected, abs=1e-12)

    def test_bulk_against_oracle(self):
        rng = np.random.default_rng(7)
        for _ in range(100):
            m = 8
            s = int(rng.integers(1, 6))
            tau = float(rng.choice([0.1, 0.25, 1.0]))
            v_a = rng.normal(size=m)
            v_p = rng.normal(size=m)
            v_n = rng.normal(size=(s, m))
            v_a, v_p, v_n = (x / np.linalg.norm(x, axis=-1, keepdims=True) for x in (v_a, v_p, v_n))
            got = info_nce(
                torch.from_numpy(v_a), torch.from_numpy(v_p), torch.from_numpy(v_n), tau
            ).item()
            want = nce_oracle(v_a.tolist(), v_p.tolist(), [n.tolist() for n in v_n], tau)
            assert got == pytest.approx(want, abs=1e-9)

    def test_monotone_decreasing_in_positive_similarity(self):
        negs = torch.stack([unit([0.2, 1.0, 0.0]), unit([-0.4, 0.3, 1.0])])
        a = unit([1.0, 0.0, 0.0])
        losses = []
        for c in np.linspace(-0.95, 0.95, 15):
            pos = unit([c, math.sqrt(1 - c * c), 0.0])
            losses.append(info_nce(a, pos, negs, tau=0.25).item())
        assert all(l1 > l2 for l1, l2 in zip(losses, losses[1:]))

    def test_positive_loss_for_finite_similarities(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            v = rng.normal(size=(4, 6))
            v /= np.linalg.norm(v, axis=-1, keepdims=True)
            loss = info_nce(
                torch.from_numpy(v[0]), torch.from_numpy(v[1]),
                torch.from_numpy(v[2:]), tau=0.25,
            )
            assert loss.item() > 0.0

    def test_rescaling_invariance_through_normalization(self):
        rng = np.random.default_rng(5)
        v = torch.from_numpy(rng.normal(size=(5, 6)))
        base = info_nce(v[0], v[1], v[2:], tau=0.4)
        scaled = info_nce(7.3 * v[0], 7.3 * v[1], 7.3 * v[2:], tau=0.4)
        assert scaled.item() == pytest.approx(base.item(), abs=1e-12)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(9)
        v = rng.normal(size=(6, 8))
        v /= np.linalg.norm(v, axis=-1, keepdims=True)
        v_a = torch.from_numpy(v[0])
        v_p, v_n = torch.from_numpy(v[1]), torch.from_numpy(v[2:])
        leaf = v_a.clone().requires_grad_(True)
        info_nce(leaf, v_p, v_n, tau=0.25).backward()
        numeric = numeric_grad(lambda: info_nce(v_a, v_p, v_n, tau=0.25), v_a)
        assert_grad_close(leaf.grad, numeric, rel=1e-4)

    def test_invalid_temperature(self):
        v = unit([1.0, 0.0])
        with pytest.raises(ConfigurationError):
            info_nce(v, v, v[None], tau=0.0)
        with pytest.raises(ConfigurationError):
            LossWeights(tau=-1.0)


# ----------------------------------------------------------------------------
# batch construction and batched contrastive loss


def small_pipeline(seed=0, kind=KIND_IMPLICIT, m=8):
    torch.manual_seed(seed)
    gen = TriPlaneGenerator(n_z=4, n_w=4, plane_resolution=4, plane_channels=2,
                            feature_channels=4)
    sr = SuperResolver(feature_channels=4, feature_resolution=6, final_resolution=12)
    disc = Discriminator(DiscVariant(kind, m=m), resolution=12)
    cfg = RenderConfig(feature_resolution=6, samples_per_ray=4, stratified=False)
    return gen, sr, disc, cfg


def distinct_poses(n, seed=0):
    dist = PoseDistribution(FixedLaw(math.pi / 2), UniformLaw(0.0, 3.0), fov=0.6)
    return sample_distinct_poses(dist, n, np.random.default_rng(seed))


class TestContrastBatch:
    def test_counts_for_two_poses(self):
        gen, sr, _, cfg = small_pipeline()
        batch = build_contrast_batch(gen, sr, distinct_poses(2), cfg,
                                     latent_rng=torch.Generator().manual_seed(1))
        assert batch.n_anchors == 2
        assert batch.n_negatives == 2
        assert len(batch.anchor_images) == 2
        assert len(batch.positive_images) == 2

    def test_positive_shares_pose_exactly(self):
        gen, sr, _, cfg = small_pipeline()
        poses = distinct_poses(3)
        batch = build_contrast_batch(gen, sr, poses, cfg,
                                     latent_rng=torch.Generator().manual_seed(2))
        assert batch.poses == poses  # one pose list serves anchors and positives
        targets = batch.pose_targets()
        assert torch.equal(targets[:3], targets[3:])

    def test_latents_differ_per_pair(self):
        gen, sr, _, cfg = small_pipeline()
        batch = build_contrast_batch(gen, sr, distinct_poses(3), cfg,
                                     latent_rng=torch.Generator().manual_seed(3))
        assert not bool((batch.anchor_z == batch.positive_z).all(dim=-1).any())

    def test_too_few_poses_rejected(self):
        gen, sr, _, cfg = small_pipeline()
        with pytest.raises(ConfigurationError):
            build_contrast_batch(gen, sr, distinct_poses(1), cfg)

    def test_duplicate_poses_rejected(self):
        pose = CameraPose(1.0, 1.0)
        images = ImagePair(torch.zeros(2, 3, 4, 4), torch.zeros(2, 3, 4, 4))
        with pytest.raises(ContractViolation):
            ContrastBatch(
                poses=[pose, pose],
                anchor_z=torch.randn(2, 4),
                positive_z=torch.randn(2, 4),
                anchor_images=images,
                positive_images=images,
            )


class _FixedEmbeddingDisc:
    """Implicit-variant stub returning prescribed unit embeddings in order."""

    def __init__(self, embeddings):
        self.embeddings = embeddings
        self.variant = DiscVariant(KIND_IMPLICIT, m=embeddings.shape[-1])

    def __call__(self, pair, condition_pose=None):
        b = pair.high.shape[0]
        return DiscriminatorOutput(
            logit=torch.zeros(b), embedding=self.embeddings[:b]
        )


class TestContrastiveLoss:
    def test_constant_embedding_gives_log_s_plus_one(self):
        gen, sr, _, cfg = small_pipeline()
        n = 3
        batch = build_contrast_batch(gen, sr, distinct_poses(n), cfg,
                                     latent_rng=torch.Generator().manual_seed(4))
        const = torch.tensor([0.6, 0.8]).expand(2 * n, 2)
        disc = _FixedEmbeddingDisc(const)
        loss = contrastive_loss(batch, disc, tau=0.25)
        s = batch.n_negatives
        assert loss.item() == pytest.approx(math.log(s + 1.0), abs=1e-6)

    def test_matches_brute_force_reimplementation(self):
        n, m = 3, 5
        rng = np.random.default_rng(11)
        v = rng.normal(size=(2 * n, m))
        v /= np.linalg.norm(v, axis=-1, keepdims=True)
        tau = 0.25

        expected = np.mean(
            [
                nce_oracle(
                    v[i].tolist(),
                    v[n + i].tolist(),
                    [v[j].tolist() for j in range(2 * n) if j not in (i, n + i)],
                    tau,
                )
                for i in range(n)
            ]
        )
        got = paired_info_nce(torch.from_numpy(v), tau).mean().item()
        assert got == pytest.approx(expected, abs=1e-9)

        gen, sr, _, cfg = small_pipeline()
        batch = build_contrast_batch(gen, sr, distinct_poses(n), cfg,
                                     latent_rng=torch.Generator().manual_seed(5))
        disc = _FixedEmbeddingDisc(torch.from_numpy(v).float())
        assert contrastive_loss(batch, disc, tau).item() == pytest.approx(expected, abs=1e-5)

    def test_perfect_positives_lower_loss(self):
        rng = np.random.default_rng(13)
        v = rng.normal(size=(8, 6))
        v /= np.linalg.norm(v, axis=-1, keepdims=True)
        v = torch.from_numpy(v)
        base = paired_info_nce(v, tau=0.25).mean()
        perfect = v.clone()
        perfect[4:] = v[:4]  # overwrite positives with the anchors
        better = paired_info_nce(perfect, tau=0.25).mean()
        assert better.item() < base.item()

    def test_requires_embedding_head(self):
        gen, sr, disc, cfg = small_pipeline(kind=KIND_REGRESSION)
        batch = build_contrast_batch(gen, sr, distinct_poses(2), cfg,
                                     latent_rng=torch.Generator().manual_seed(6))
        with pytest.raises(ContractViolation):
            contrastive_loss(batch, disc, tau=0.25)


# ----------------------------------------------------------------------------
# total objective


def real_pair_for(sr_final=12, b=4, seed=21):
    g = torch.Generator().manual_seed(seed)
    images = torch.rand(b, 3, sr_final, sr_final, generator=g) * 2 - 1
    from posefree3d.superres import real_image_pair

    return real_image_pair(images, 6)


class TestTotalObjective:
    def test_zero_lambda_pose_reduces_to_plain_gan(self):
        results = {}
        for kind in (KIND_REGRESSION, KIND_IMPLICIT, KIND_ENSEMBLE):
            gen, sr, disc, cfg = small_pipeline(seed=31, kind=kind)
            batch = build_contrast_batch(gen, sr, distinct_poses(2), cfg,
                                         latent_rng=torch.Generator().manual_seed(7))
            weights = LossWeights(lambda_pose=0.0)
            loss_d, loss_g, metrics = total_objective(
                disc, weights, real_pair_for(), batch
            )
            results[kind] = (loss_d.item(), loss_g.item())
        vals = list(results.values())
        assert vals[0] == vals[1] == vals[2]

    def test_exact_pose_estimate_contributes_nothing(self):
        gen, sr, disc, cfg = small_pipeline(seed=32, kind=KIND_REGRESSION)
        batch = build_contrast_batch(gen, sr, distinct_poses(2), cfg,
                                     latent_rng=torch.Generator().manual_seed(8))

        class _OracleposeDisc:
            variant = DiscVariant(KIND_REGRESSION)

            def __call__(self, pair, condition_pose=None):
                b = pair.high.shape[0]
                est = batch.pose_targets()[:b] if b == 4 else torch.zeros(b, 2)
                return DiscriminatorOutput(logit=pair.high.flatten(1).mean(1), pose_estimate=est)

        oracle = _OracleposeDisc()
        with_pose = total_objective(oracle, LossWeights(lambda_r1=0.0), real_pair_for(), batch)
        without = total_objective(
            oracle, LossWeights(lambda_r1=0.0, lambda_pose=0.0), real_pair_for(), batch
        )
        assert with_pose[0].item() == pytest.approx(without[0].item(), abs=1e-7)
        assert with_pose[2]["pose_loss"] == pytest.approx(0.0, abs=1e-7)

    def test_ensemble_reports_both_aux_terms(self):
        gen, sr, disc, cfg = small_pipeline(seed=33, kind=KIND_ENSEMBLE)
        batch = build_contrast_batch(gen, sr, distinct_poses(2), cfg,
                                     latent_rng=torch.Generator().manual_seed(9))
        _, _, metrics = total_objective(disc, LossWeights(), real_pair_for(), batch)
        assert metrics["pose_loss"] > 0.0
        assert metrics["info_nce"] > 0.0

    def test_pose_loss_never_touches_real_images(self):
        # gradient-level structural check: the pose-regression term is
        # disconnected from the real batch
        gen, sr, disc, cfg = small_pipeline(seed=34, kind=KIND_REGRESSION)
        batch = build_contrast_batch(gen, sr, distinct_poses(2), cfg,
                                     latent_rng=torch.Generator().manual_seed(10))
        real = real_pair_for()
        real.high.requires_grad_(True)
        _, metrics = discriminator_loss(
            disc, LossWeights(lambda_r1=0.0), real, batch, apply_r1=False
        )
        grad = torch.autograd.grad(
            metrics["pose_loss"], real.high, allow_unused=True, retain_graph=True
        )[0]
        assert grad is None
        # ... while it is connected to the discriminator parameters
        grad_d = torch.autograd.grad(
            metrics["pose_loss"], disc.head_pose.weight, allow_unused=True
        )[0]
        assert grad_d is not None

    def test_aux_terms_reach_generator_in_g_loss(self):
        gen, sr, disc, cfg = small_pipeline(seed=35, kind=KIND_IMPLICIT)
        batch = build_contrast_batch(gen, sr, distinct_poses(2), cfg,
                                     latent_rng=torch.Generator().manual_seed(11))
        loss_g, parts = generator_loss(disc, LossWeights(), batch)
        grads = torch.autograd.grad(
            parts["info_nce"], list(gen.parameters()), allow_unused=True, retain_graph=True
        )
        assert any(g is not None and g.abs().sum() > 0 for g in grads)

    def test_lambda_pose_zero_still_reports_info_nce(self):
        gen, sr, disc, cfg = small_pipeline(seed=36, kind=KIND_IMPLICIT)
        batch = build_contrast_batch(gen, sr, distinct_poses(2), cfg,
                                     latent_rng=torch.Generator().manual_seed(12))
        _, _, metrics = total_objective(
            disc, LossWeights(lambda_pose=0.0), real_pair_for(), batch
        )
        assert metrics["info_nce"] > 0.0
