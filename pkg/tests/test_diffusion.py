import math

import numpy as np
import pytest
import torch

from oracles import naive_rms
from tryonlab.config import RunConfig
from tryonlab.diffusion import (ImageAutoencoder, LatentCodec, NoiseSchedule,
                                SynLossReport, UNetDenoiser, completed_latent_error,
                                compute_syn_losses, ddim_loop, ddim_timesteps,
                                ditp_loss, downsample_mask, forward_diffuse,
                                garment_region, load_codec, load_denoiser,
                                make_schedule, rms, sample_tryon, syn_train_step,
                                train_autoencoder, train_diffusion)
from tryonlab.errors import ConfigError, MissingArtifactError
from tryonlab.features import IdentityFeatureExtractor
from tryonlab.synthdata import TryOnDataset


@pytest.fixture(scope="module")
def schedule():
    return make_schedule(1000, 1e-4, 2e-2)


class TestSchedule:
    def test_linear_betas_and_monotone_alphabar(self, schedule):
        assert schedule.timesteps == 1000
        assert abs(schedule.betas[0] - 1e-4) < 1e-12
        assert abs(schedule.betas[-1] - 2e-2) < 1e-12
        diffs = np.diff(schedule.betas)
        assert np.allclose(diffs, diffs[0])
        assert np.all(np.diff(schedule.alphas_cumprod) < 0)

    def test_inconsistent_cumprod_rejected(self, schedule):
        bad = NoiseSchedule(schedule.timesteps, schedule.betas,
                            schedule.alphas_cumprod + 1e-6)
        with pytest.raises(ConfigError):
            bad.validate()

    def test_alpha_bar_one_indexed(self, schedule):
        assert float(schedule.alpha_bar(1)) == pytest.approx(
            float(schedule.alphas_cumprod[0]))
        assert float(schedule.alpha_bar(1000)) == pytest.approx(
            float(schedule.alphas_cumprod[-1]))
        with pytest.raises(ValueError):
            schedule.alpha_bar(0)
        with pytest.raises(ValueError):
            schedule.alpha_bar(1001)


class TestForwardDiffuse:
    def test_moments_at_three_times(self, schedule):
        # empirical mean/std of z_t over many draws vs the closed form,
        # within three standard errors
        gen = torch.Generator().manual_seed(0)
        n = 10_000
        z0 = torch.full((n, 1, 1, 1), 0.7)
        for t in (1, 500, 1000):
            eps = torch.randn(n, 1, 1, 1, generator=gen)
            z_t = forward_diffuse(z0, t, eps, schedule)
            ab = float(schedule.alpha_bar(t))
            want_mean = math.sqrt(ab) * 0.7
            want_std = math.sqrt(1 - ab)
            se_mean = want_std / math.sqrt(n)
            got_mean = float(z_t.mean())
            got_std = float(z_t.std())
            assert abs(got_mean - want_mean) <= 3 * se_mean, t
            se_std = want_std / math.sqrt(2 * (n - 1))
            assert abs(got_std - want_std) <= 3 * se_std, t

    def test_same_noise_identity(self, schedule):
        # z_t - z_t' = sqrt(alpha_bar_t) (z0 - z0') when the same noise is used
        gen = torch.Generator().manual_seed(1)
        z0 = torch.randn(4, 4, 8, 8, generator=gen)
        z0p = torch.randn(4, 4, 8, 8, generator=gen)
        for t in (1, 250, 999):
            eps = torch.randn(4, 4, 8, 8, generator=gen)
            z_t = forward_diffuse(z0, t, eps, schedule)
            z_tp = forward_diffuse(z0p, t, eps, schedule)
            want = math.sqrt(float(schedule.alpha_bar(t))) * (z0 - z0p)
            assert float((z_t - z_tp - want).abs().max()) <= 1e-6, t

    def test_batched_timesteps(self, schedule):
        gen = torch.Generator().manual_seed(2)
        z0 = torch.randn(3, 2, 4, 4, generator=gen)
        eps = torch.randn(3, 2, 4, 4, generator=gen)
        t = torch.tensor([1, 500, 1000])
        batched = forward_diffuse(z0, t, eps, schedule)
        for i in range(3):
            single = forward_diffuse(z0[i], int(t[i]), eps[i], schedule)
            assert torch.allclose(batched[i], single, atol=1e-7)

    def test_shape_mismatch_raises(self, schedule):
        with pytest.raises(ValueError):
            forward_diffuse(torch.zeros(1, 4, 4, 4), 10, torch.zeros(1, 4, 4, 5),
                            schedule)


class TestLossPieces:
    def test_rms_matches_oracle(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((3, 5, 7))
        ours = float(rms(torch.from_numpy(x)))
        assert abs(ours - naive_rms(x)) <= 1e-9

    def test_ditp_loss_hand_example(self):
        # residual of +-0.5 in half the entries: rms = 0.5 / sqrt(2)
        z_t = torch.zeros(1, 1, 2, 2)
        z_tp = torch.zeros(1, 1, 2, 2)
        delta = torch.tensor([[[[0.5, 0.0], [0.0, 0.5]]]])
        val = float(ditp_loss(delta, z_t, z_tp))
        assert val == pytest.approx(0.5 / math.sqrt(2), abs=1e-6)
        assert val == pytest.approx(0.3536, abs=5e-5)

    def test_ditp_loss_zero_when_delta_bridges(self, schedule):
        gen = torch.Generator().manual_seed(3)
        z0 = torch.randn(2, 4, 8, 8, generator=gen)
        z0p = torch.randn(2, 4, 8, 8, generator=gen)
        eps = torch.randn(2, 4, 8, 8, generator=gen)
        t = 400
        z_t = forward_diffuse(z0, t, eps, schedule)
        z_tp = forward_diffuse(z0p, t, eps, schedule)
        perfect = z_t - z_tp
        assert float(ditp_loss(perfect, z_t, z_tp)) <= 5e-6

    def test_compute_syn_losses_with_stub_denoiser(self, schedule):
        # a denoiser stub that predicts the exact noise and the exact latent
        # difference drives l_rec and l_dif to ~0, leaving only image terms
        cfg = RunConfig()
        gen = torch.Generator().manual_seed(4)
        z0 = torch.randn(2, 4, 8, 8, generator=gen)
        z_w = torch.randn(2, 4, 8, 8, generator=gen)
        eps = torch.randn(2, 4, 8, 8, generator=gen)
        person = torch.rand(2, 3, 32, 32, generator=gen)
        t = torch.tensor([300, 700])

        z_t = forward_diffuse(z0, t, eps, schedule)
        z_tp = forward_diffuse(z_w, t, eps, schedule)

        def denoise_fn(z_in, t_in):
            return eps.clone(), (z_t - z_tp)

        def decode_fn(z):
            return person  # exact image regardless of latent

        report = compute_syn_losses(z0, z_w, t, eps, person, denoise_fn, decode_fn,
                                    schedule, IdentityFeatureExtractor(), cfg,
                                    use_ditp=True)
        assert float(report.l_rec) <= 1e-5
        assert float(report.l_dif) <= 1e-5
        assert float(report.l_mae_img) <= 1e-7
        assert float(report.total) <= 1e-4

    def test_compute_syn_losses_reduces_without_ditp(self, schedule):
        cfg = RunConfig()
        gen = torch.Generator().manual_seed(5)
        z0 = torch.randn(1, 4, 8, 8, generator=gen)
        z_w = torch.randn(1, 4, 8, 8, generator=gen)
        eps = torch.randn(1, 4, 8, 8, generator=gen)
        person = torch.rand(1, 3, 32, 32, generator=gen)
        t = torch.tensor([100])
        calls = []

        def denoise_fn(z_in, t_in):
            calls.append(z_in)
            return torch.zeros_like(z_in), torch.zeros_like(z_in)

        report = compute_syn_losses(z0, z_w, t, eps, person, denoise_fn,
                                    lambda z: person, schedule,
                                    IdentityFeatureExtractor(), cfg, use_ditp=False)
        assert len(calls) == 1  # single pass, no completion branch
        assert float(report.l_dif) == 0.0
        assert float(report.l_rec) == pytest.approx(float(rms(eps)), abs=1e-6)


class TestDenoiser:
    def test_two_heads_zero_at_init(self, tiny_cfg):
        torch.manual_seed(0)
        model = UNetDenoiser(tiny_cfg)
        z = torch.randn(2, 4, 8, 8)
        mask = torch.ones(2, 1, 8, 8)
        q = torch.randn(2, tiny_cfg.d_q)
        eps_hat, delta_hat = model.denoise_predict(z, z, mask, q, 500)
        assert torch.all(eps_hat == 0) and torch.all(delta_hat == 0)

    def test_accepts_garment_image_or_embedding(self, tiny_cfg):
        torch.manual_seed(1)
        model = UNetDenoiser(tiny_cfg)
        model.eval()
        h, w = tiny_cfg.resolution
        z = torch.randn(1, 4, h // 4, w // 4)
        mask = torch.zeros(1, 1, h // 4, w // 4)
        garment = torch.rand(1, 3, h, w)
        a, _ = model.denoise_predict(z, z, mask, garment, 10)
        b, _ = model.denoise_predict(z, z, mask, model.embed_garment(garment), 10)
        assert torch.allclose(a, b, atol=1e-6)

    def test_garment_embedding_unit_norm(self, tiny_cfg):
        torch.manual_seed(2)
        model = UNetDenoiser(tiny_cfg)
        q = model.embed_garment(torch.rand(3, 3, 32, 32))
        norms = q.norm(dim=-1)
        assert torch.allclose(norms, torch.ones_like(norms), atol=1e-5)


class TestMaskAndRegion:
    def test_downsample_mask_any_overlap(self):
        mask = torch.zeros(1, 16, 16)
        mask[0, 5, 5] = 1.0
        small = downsample_mask(mask)
        assert small.shape == (1, 4, 4)
        assert float(small[0, 1, 1]) == 1.0
        assert float(small.sum()) == 1.0

    def test_garment_region_recovers_coverage(self, tiny_dataset):
        ds = TryOnDataset(tiny_dataset, "train")
        s = ds[0]
        region = garment_region(s)
        assert region.shape == (1, *s.person.shape[1:])
        assert region.sum() > 50
        # region must sit inside the dilated inpaint mask
        assert np.all(region <= s.inpaint_mask)


class TestDDIM:
    def test_timesteps_span_full_range(self):
        ts = ddim_timesteps(1000, 50)
        assert ts[0] == 1000 and ts[-1] == 1
        assert all(a > b for a, b in zip(ts, ts[1:]))
        assert len(ts) == 50

    def test_timesteps_small_counts(self):
        # a single step evaluates at the low end of the evenly spaced grid
        assert ddim_timesteps(1000, 1) == [1]
        assert ddim_timesteps(10, 10) == list(range(10, 0, -1))

    def test_ddim_loop_matches_handrolled_reference(self, schedule):
        # with a fixed linear "denoiser" the loop must equal an independently
        # written DDIM update rule
        torch.manual_seed(3)
        w = torch.randn(4) * 0.1

        def denoise_fn(z, t):
            return z * w.view(1, 4, 1, 1), torch.zeros_like(z)

        z_start = torch.randn(1, 4, 4, 4)
        ours = ddim_loop(z_start.clone(), denoise_fn, schedule, steps=7)

        ts = ddim_timesteps(1000, 7)
        z = z_start.clone()
        for i, t_now in enumerate(ts):
            eps_hat, _ = denoise_fn(z, t_now)
            ab = float(schedule.alpha_bar(t_now))
            z0_hat = (z - math.sqrt(1 - ab) * eps_hat) / math.sqrt(ab)
            if i + 1 < len(ts):
                abn = float(schedule.alpha_bar(ts[i + 1]))
                z = math.sqrt(abn) * z0_hat + math.sqrt(1 - abn) * eps_hat
            else:
                z = z0_hat
        assert torch.allclose(ours, z, atol=1e-5)

    def test_blend_keeps_known_region(self, schedule):
        # with a zero mask everywhere, blending pins the result to z_w exactly
        z_w = torch.randn(1, 4, 4, 4)
        eps = torch.randn(1, 4, 4, 4)

        def denoise_fn(z, t):
            return torch.zeros_like(z), torch.zeros_like(z)

        def blend_fn(z, t_next):
            known = z_w if t_next == 0 else forward_diffuse(z_w, t_next, eps, schedule)
            return 0.0 * z + 1.0 * known

        out = ddim_loop(forward_diffuse(z_w, 1000, eps, schedule), denoise_fn,
                        schedule, steps=5, blend_fn=blend_fn)
        assert torch.allclose(out, z_w, atol=1e-6)


@pytest.fixture(scope="module")
def trained_tiny(tmp_path_factory, tiny_dataset, tiny_cfg):
    """A couple of steps of autoencoder + denoiser training for API tests."""
    out = tmp_path_factory.mktemp("diff")
    ae = train_autoencoder(tiny_dataset, tiny_cfg, out / "ae", steps=3)
    diff = train_diffusion(tiny_dataset, tiny_cfg, out / "diff",
                           out / "ae" / "ae.ckpt", steps=3)
    return out, ae, diff


class TestTrainingAndSampling:
    def test_artifacts_written(self, trained_tiny):
        out, ae, diff = trained_tiny
        assert (out / "ae" / "ae.ckpt").exists()
        assert (out / "ae" / "ae_report.json").exists()
        assert (out / "diff" / "diffusion.ckpt").exists()
        assert (out / "diff" / "train_diffusion.jsonl").exists()
        assert "held_out_psnr" in ae

    def test_codec_roundtrip_shapes(self, trained_tiny, tiny_cfg):
        out, _, _ = trained_tiny
        codec, meta = load_codec(out / "ae" / "ae.ckpt")
        h, w = tiny_cfg.resolution
        img = torch.rand(2, 3, h, w)
        z = codec.encode(img)
        assert z.shape == (2, tiny_cfg.latent_channels, h // 4, w // 4)
        back = codec.decode(z)
        assert back.shape == img.shape

    def test_sample_deterministic(self, trained_tiny, tiny_dataset, tiny_cfg):
        out, _, _ = trained_tiny
        codec, _ = load_codec(out / "ae" / "ae.ckpt")
        model, meta = load_denoiser(out / "diff" / "diffusion.ckpt")
        schedule = make_schedule(tiny_cfg.timesteps, tiny_cfg.beta_start,
                                 tiny_cfg.beta_end)
        ds = TryOnDataset(tiny_dataset, "test")
        s = ds[0]
        args = (torch.from_numpy(s.agnostic_composite), torch.from_numpy(s.garment),
                torch.from_numpy(s.inpaint_mask), codec, model, schedule, 5)
        a = sample_tryon(*args, seed=9)
        b = sample_tryon(*args, seed=9)
        c = sample_tryon(*args, seed=10)
        assert torch.equal(a, b)
        assert not torch.equal(a, c)
        assert a.shape == (3, *tiny_cfg.resolution)
        assert float(a.min()) >= 0.0 and float(a.max()) <= 1.0

    def test_untrained_checkpoint_refused(self, trained_tiny, tiny_cfg, tmp_path):
        from tryonlab.checkpoints import save_checkpoint

        model = UNetDenoiser(tiny_cfg)
        path = tmp_path / "untrained.ckpt"
        save_checkpoint(path, "diffusion", model, tiny_cfg.to_dict(), trained_steps=0)
        with pytest.raises(MissingArtifactError):
            load_denoiser(path)

    def test_empty_mask_augmentation_applies(self, trained_tiny, tiny_dataset,
                                             tiny_cfg, schedule):
        # with probability 1 the incomplete composite is replaced by the
        # person and the mask cleared; the differential target then vanishes
        out, _, _ = trained_tiny
        codec, _ = load_codec(out / "ae" / "ae.ckpt")
        torch.manual_seed(0)
        cfg = tiny_cfg.replace(empty_mask_prob=1.0)
        model = UNetDenoiser(cfg)
        opt = torch.optim.Adam(model.parameters(), lr=1e-4)
        ds = TryOnDataset(tiny_dataset, "train")
        samples = [ds[i] for i in range(2)]
        batch = {
            "person": torch.from_numpy(np.stack([s.person for s in samples])),
            "agnostic": torch.from_numpy(np.stack([s.agnostic_composite for s in samples])),
            "mask": torch.from_numpy(np.stack([s.inpaint_mask for s in samples])),
            "garment": torch.from_numpy(np.stack([s.garment for s in samples])),
        }
        sched = make_schedule(cfg.timesteps, cfg.beta_start, cfg.beta_end)
        gen = torch.Generator().manual_seed(0)
        report = syn_train_step(batch, model, codec, sched, cfg, opt, gen,
                                IdentityFeatureExtractor(), use_ditp=True)
        # identical latents with zero-init mapper: the differential loss is 0
        assert float(report.l_dif) <= 1e-6

    def test_completed_latent_error_baseline(self, trained_tiny, tiny_dataset,
                                             tiny_cfg):
        out, _, _ = trained_tiny
        codec, _ = load_codec(out / "ae" / "ae.ckpt")
        model, _ = load_denoiser(out / "diff" / "diffusion.ckpt")
        schedule = make_schedule(tiny_cfg.timesteps, tiny_cfg.beta_start,
                                 tiny_cfg.beta_end)
        ds = TryOnDataset(tiny_dataset, "test")
        base = completed_latent_error(None, codec, ds, 2, [100, 500], schedule, seed=1)
        got = completed_latent_error(model, codec, ds, 2, [100, 500], schedule, seed=1)
        assert base > 0
        assert got >= 0
