import numpy as np
import pytest
import torch

from biskip.data import ImagePair
from biskip.losses import LossWeights, PerceptualExtractor
from biskip.models import (
    GeneratorSpec,
    ModelVariant,
    build_critic,
    build_generator,
    parameter_hash,
)
from biskip.trainer import (
    Scheme,
    TrainConfig,
    TrainingDiverged,
    critic_step,
    fit_deep_prior,
    generator_step,
    lr_at,
    train,
)


def tiny_dataset(n=2, size=64, seed=0):
    gen = torch.Generator().manual_seed(seed)
    pairs = []
    for i in range(n):
        sharp = torch.rand((3, size, size), generator=gen) * 2 - 1
        blurred = (sharp + 0.1 * (torch.rand(sharp.shape, generator=gen) - 0.5)).clamp(-1, 1)
        pairs.append(ImagePair(sharp, blurred, f"{i:02d}.png"))
    return pairs


def tiny_config(**overrides):
    defaults = dict(
        scheme=Scheme.parse("SA1P"),
        epochs=2,
        crop=64,
        lr0=1e-3,
        checkpoint_every=100,
    )
    defaults.update(overrides)
    return TrainConfig(**defaults)


class TestScheme:
    @pytest.mark.parametrize("text,flags", [
        ("SA1P", (True, True, 1, True)),
        ("A2", (False, True, 2, False)),
        ("1", (False, False, 1, False)),
        ("P", (False, False, None, True)),
        ("2P", (False, False, 2, True)),
        ("AP", (False, True, None, True)),
    ])
    def test_parse(self, text, flags):
        s = Scheme.parse(text)
        assert (s.selfpaced, s.adversarial, s.pixel_norm, s.perceptual) == flags
        assert str(s) == text

    def test_adversarial_without_content_rejected(self):
        with pytest.raises(ValueError):
            Scheme.parse("A")
        with pytest.raises(ValueError):
            Scheme.parse("SA")

    def test_garbage_rejected(self):
        with pytest.raises(ValueError):
            Scheme.parse("XP1")

    def test_run_tag(self):
        config = tiny_config(variant=ModelVariant.BS)
        assert config.run_tag() == "SA1P-BS"
        config = tiny_config(scheme=Scheme.parse("A2"), variant=ModelVariant.S)
        assert config.run_tag() == "A2-S"


class TestConfig:
    def test_defaults_match_training_protocol(self):
        config = TrainConfig()
        assert config.lr0 == 1e-4
        assert config.d_g_ratio == 2
        assert config.epochs == 300
        assert config.crop == 256
        assert config.batch == 1
        assert config.weights.gamma1 == 100.0
        assert config.weights.gamma2 == 0.1

    def test_epochs_minimum(self):
        with pytest.raises(ValueError):
            tiny_config(epochs=1).validate()


class TestLrSchedule:
    def test_constant_first_half(self):
        config = TrainConfig(epochs=300)
        assert lr_at(100, config) == pytest.approx(1e-4)
        assert lr_at(150, config) == pytest.approx(1e-4)

    def test_endpoint_zero(self):
        assert lr_at(300, TrainConfig(epochs=300)) == pytest.approx(0.0)

    def test_decay_midpoint(self):
        assert lr_at(225, TrainConfig(epochs=300)) == pytest.approx(5e-5)

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            lr_at(0, TrainConfig(epochs=300))
        with pytest.raises(ValueError):
            lr_at(301, TrainConfig(epochs=300))


class TestStepIsolation:
    def setup_method(self):
        torch.manual_seed(0)
        self.g = build_generator(GeneratorSpec(), seed=0)
        self.d = build_critic(1)
        self.g_opt = torch.optim.Adam(self.g.parameters(), lr=1e-3)
        self.d_opt = torch.optim.Adam(self.d.parameters(), lr=1e-3)
        self.alpha = torch.Generator().manual_seed(0)
        self.batch = tiny_dataset(1)
        self.weights = LossWeights()

    def test_critic_step_leaves_generator(self):
        g_before = parameter_hash(self.g)
        d_before = parameter_hash(self.d)
        critic_step(self.d, self.g, self.batch, [1.0], self.weights,
                    self.d_opt, self.alpha)
        assert parameter_hash(self.g) == g_before
        assert parameter_hash(self.d) != d_before

    def test_generator_step_leaves_critic(self):
        extractor = PerceptualExtractor(seed=2)
        d_before = parameter_hash(self.d)
        g_before = parameter_hash(self.g)
        generator_step(self.g, self.d, self.batch, [1.0], self.weights,
                       self.g_opt, Scheme.parse("SA1P"), extractor)
        assert parameter_hash(self.d) == d_before
        assert parameter_hash(self.g) != g_before

    def test_zero_weight_masks_both_steps(self):
        extractor = PerceptualExtractor(seed=2)
        g_before = parameter_hash(self.g)
        d_before = parameter_hash(self.d)
        critic_step(self.d, self.g, self.batch, [0.0], self.weights,
                    self.d_opt, self.alpha)
        generator_step(self.g, self.d, self.batch, [0.0], self.weights,
                       self.g_opt, Scheme.parse("SA1P"), extractor)
        assert parameter_hash(self.g) == g_before
        assert parameter_hash(self.d) == d_before

    def test_critic_gap_trend_on_fixed_points(self):
        # score gap (real - fake) should trend upward over repeated steps
        real = self.batch[0].sharp
        with torch.no_grad():
            fake = self.g(self.batch[0].blurred.unsqueeze(0)).squeeze(0)

        def gap():
            with torch.no_grad():
                return float(self.d(real.unsqueeze(0)) - self.d(fake.unsqueeze(0)))

        from biskip.losses import adversarial_loss, gradient_penalty

        before = gap()
        for _ in range(100):
            adv = adversarial_loss(self.d, [real], [fake], [1.0])
            pen = gradient_penalty(self.d, [real], [fake], [1.0],
                                   self.weights.beta, generator=self.alpha)
            loss = -adv + pen
            self.d_opt.zero_grad()
            loss.backward()
            self.d_opt.step()
        assert gap() > before

    def test_pure_content_scheme_reduces_bilevel(self):
        from biskip.losses import bilevel_loss

        extractor = PerceptualExtractor(seed=2)
        scheme = Scheme.parse("1P")
        pair = self.batch[0]
        with torch.no_grad():
            fake = self.g(pair.blurred.unsqueeze(0)).squeeze(0)
            initial = float(bilevel_loss(extractor, pair.sharp, fake, self.weights))
        for _ in range(50):
            generator_step(self.g, None, [pair], [1.0], self.weights,
                           self.g_opt, scheme, extractor)
        with torch.no_grad():
            fake = self.g(pair.blurred.unsqueeze(0)).squeeze(0)
            final = float(bilevel_loss(extractor, pair.sharp, fake, self.weights))
        assert final <= 0.5 * initial


class TestTrain:
    def test_empty_dataset_rejected(self):
        with pytest.raises(ValueError):
            train(tiny_config(), [])

    def test_report_structure(self):
        report = train(tiny_config(), tiny_dataset())
        assert len(report.epochs) == 2
        rec = report.epochs[0]
        assert rec["lambda"] == "inf"
        assert rec["admitted_fraction"] == 1.0
        assert rec["q"] > 1
        assert report.epochs[1]["lambda"] != "inf"

    def test_epoch1_admits_everything(self):
        report = train(tiny_config(), tiny_dataset(3))
        assert report.epochs[0]["admitted_fraction"] == 1.0

    def test_determinism(self):
        a = train(tiny_config(), tiny_dataset())
        b = train(tiny_config(), tiny_dataset())
        assert a.to_jsonl() == b.to_jsonl()

    def test_scheme_algebra_zero_fields(self):
        # disabling a loss flag zeroes its breakdown column for all epochs
        report = train(tiny_config(scheme=Scheme.parse("1")), tiny_dataset())
        for rec in report.epochs:
            assert rec["mean_adversarial"] == 0.0
            assert rec["mean_penalty"] == 0.0
            assert rec["mean_perceptual"] == 0.0
            assert rec["mean_pixel"] > 0.0

    def test_no_perceptual_flag(self):
        report = train(tiny_config(scheme=Scheme.parse("A2")), tiny_dataset())
        for rec in report.epochs:
            assert rec["mean_perceptual"] == 0.0

    def test_checkpoints_written(self, tmp_path):
        config = tiny_config(checkpoint_every=1)
        report = train(config, tiny_dataset(), run_dir=tmp_path)
        assert len(report.checkpoints) == 2
        assert (tmp_path / "report.jsonl").exists()
        from biskip.models import load_checkpoint

        g, d, header, opt = load_checkpoint(report.checkpoints[-1])
        assert header["epoch"] == 2
        assert header["scheme"] == "SA1P"
        assert header["selfpaced_state"]["t"] == 3
        assert d is not None

    def test_lambda_trace_follows_max_rule(self):
        report = train(tiny_config(epochs=3), tiny_dataset(3))
        # epoch 2's lambda equals the max bi-level loss recorded in epoch 1
        assert report.epochs[1]["lambda"] > 0
        assert report.epochs[1]["lambda"] != "inf"


class TestDeepPrior:
    def test_dimension_error(self):
        with pytest.raises(ValueError):
            fit_deep_prior(torch.zeros(3, 100, 100), iters=1, seed=0)

    def test_noise_fit_reduces_mse(self):
        gen = torch.Generator().manual_seed(0)
        target = torch.rand((3, 64, 64), generator=gen) * 2 - 1
        out, trace, snaps = fit_deep_prior(target, iters=60, seed=0,
                                           snapshots=(30, 60))
        assert len(trace) == 60
        assert trace[-1] < trace[0]
        assert set(snaps) == {30, 60}
        assert out.shape == target.shape

    def test_blurred_source_variant(self):
        gen = torch.Generator().manual_seed(1)
        target = torch.rand((3, 64, 64), generator=gen) * 2 - 1
        source = (target + 0.1 * torch.rand(target.shape, generator=gen)).clamp(-1, 1)
        out, trace, _ = fit_deep_prior(target, source, iters=30, seed=0)
        assert trace[-1] < trace[0]

    def test_deterministic(self):
        gen = torch.Generator().manual_seed(2)
        target = torch.rand((3, 64, 64), generator=gen) * 2 - 1
        _, a, _ = fit_deep_prior(target, iters=10, seed=3)
        _, b, _ = fit_deep_prior(target, iters=10, seed=3)
        assert a == b
