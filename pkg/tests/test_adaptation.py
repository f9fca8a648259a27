import copy
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from torch import nn

from adaptloc.adaptation import (
    LOG_COLUMNS,
    AdaptationConfig,
    AdaptiveModel,
    DomainBatch,
    LossBundle,
    ModuleFlags,
    TrainConfig,
    adapt,
    build_model,
    focal_domain_loss,
    parse_log_line,
    pretrain,
    read_loss_log,
    source_only_steps,
    spatial_domain_loss,
    temporal_image_loss,
    temporal_instance_loss,
    write_loss_log,
)
from adaptloc.checkpoint import load_into, read_checkpoint, save_checkpoint
from adaptloc.detector import make_clip_sample, make_target_sample
from adaptloc.encoders import EncoderConfig, GradientReversal
from adaptloc.synthdata import DomainSpec, generate, load_dataset, paired_target_spec

torch.manual_seed(0)


@pytest.fixture(scope="module")
def domains(tmp_path_factory):
    root = tmp_path_factory.mktemp("adapt_ds")
    src_spec = DomainSpec(name="src", seed=31)
    tgt_spec = paired_target_spec(src_spec)
    generate(src_spec, root / "src", num_clips=4, clip_length=12)
    generate(tgt_spec, root / "tgt", num_clips=4, clip_length=12)
    return (
        root,
        load_dataset(root / "src", mode="source"),
        load_dataset(root / "tgt", mode="target"),
    )


def tiny_cfg(**kw):
    defaults = dict(seed=0, pretrain_steps=3, adapt_steps=3, n_s=2, n_t=2)
    defaults.update(kw)
    return TrainConfig(**defaults)


class TestAdaptationConfig:
    def test_defaults(self):
        cfg = AdaptationConfig()
        assert cfg.gamma == 2.0 and cfg.lam == 0.1 and cfg.map_reduction == "sum"

    def test_rejects_bad_values(self):
        with pytest.raises(ValueError):
            AdaptationConfig(gamma=-1.0)
        with pytest.raises(ValueError):
            AdaptationConfig(lam=math.inf)
        with pytest.raises(ValueError):
            AdaptationConfig(map_reduction="max")


class TestModuleFlags:
    def test_parse_full(self):
        assert ModuleFlags.parse("Timg,Tinst,Simg") == ModuleFlags(True, True, True)

    def test_parse_single(self):
        assert ModuleFlags.parse("Simg") == ModuleFlags(simg=True)

    def test_parse_none_and_all(self):
        assert ModuleFlags.parse("none") == ModuleFlags()
        assert ModuleFlags.parse("all") == ModuleFlags.all_on()
        assert ModuleFlags.parse("") == ModuleFlags()

    def test_parse_unknown(self):
        with pytest.raises(ValueError):
            ModuleFlags.parse("Simg,Dfoo")

    def test_tag(self):
        assert ModuleFlags(True, False, True).tag() == "Simg+Tinst"
        assert ModuleFlags().tag() == "none"


class TestFocalLoss:
    def test_hand_value(self):
        v = focal_domain_loss(torch.tensor([0.8], dtype=torch.float64), 2.0)
        assert float(v) == pytest.approx(0.008926, abs=1e-5)

    def test_gamma_zero_is_bce(self):
        p = torch.linspace(0.001, 0.999, 100, dtype=torch.float64)
        focal = focal_domain_loss(p, 0.0)
        bce = -torch.log(p)
        torch.testing.assert_close(focal, bce, rtol=0, atol=1e-7)

    def test_loss_vanishes_as_p_approaches_one(self):
        p = torch.linspace(0.5, 0.9999, 50, dtype=torch.float64)
        vals = focal_domain_loss(p, 2.0)
        diffs = vals[1:] - vals[:-1]
        assert (diffs <= 0).all()
        assert float(vals[-1]) < 1e-7

    def test_clamped_at_boundaries(self):
        v = focal_domain_loss(torch.tensor([0.0, 1.0]), 2.0)
        assert torch.isfinite(v).all()

    @given(
        st.floats(0.001, 0.999),
        st.floats(0.0, 4.0),
        st.floats(0.01, 4.0),
    )
    @settings(max_examples=100)
    def test_higher_gamma_weighs_less(self, p, g1, dg):
        lo = focal_domain_loss(torch.tensor([p], dtype=torch.float64), g1 + dg)
        hi = focal_domain_loss(torch.tensor([p], dtype=torch.float64), g1)
        assert float(lo) <= float(hi) + 1e-12


class TestSpatialDomainLoss:
    def test_perfect_predictions_near_zero(self):
        p_src = torch.full((4,), 1e-6, dtype=torch.float64)
        p_tgt = torch.full((3,), 1.0 - 1e-6, dtype=torch.float64)
        assert float(spatial_domain_loss(p_src, p_tgt, 2.0)) < 1e-9

    def test_mean_over_each_domain(self):
        p_src = torch.tensor([0.2, 0.2], dtype=torch.float64)
        p_tgt = torch.tensor([0.8], dtype=torch.float64)
        expected = focal_domain_loss(torch.tensor([0.8], dtype=torch.float64), 2.0) * 2
        got = spatial_domain_loss(p_src, p_tgt, 2.0)
        torch.testing.assert_close(got, expected[0], rtol=1e-12, atol=0)


class TestTemporalImageLoss:
    def test_half_map_oracle(self):
        q_t = torch.full((1, 2, 2), 0.5, dtype=torch.float64)
        v = temporal_image_loss(torch.zeros(0, 2, 2), q_t, "sum")
        assert float(v) == pytest.approx(4.0 * math.log(2.0), abs=1e-4)

    def test_mean_reduction_divides_by_area(self):
        q_t = torch.full((1, 2, 2), 0.5, dtype=torch.float64)
        v = temporal_image_loss(torch.zeros(0, 2, 2), q_t, "mean")
        assert float(v) == pytest.approx(math.log(2.0), abs=1e-6)

    def test_source_optimum_near_zero(self):
        q_s = torch.full((2, 3, 3), 1e-7, dtype=torch.float64)
        v = temporal_image_loss(q_s, torch.zeros(0, 3, 3), "sum")
        assert float(v) < 1e-5

    def test_label_swap_symmetry(self):
        rng = torch.Generator().manual_seed(0)
        q_s = torch.rand(2, 3, 3, generator=rng, dtype=torch.float64)
        q_t = torch.rand(2, 3, 3, generator=rng, dtype=torch.float64)
        a = temporal_image_loss(q_s, q_t, "sum")
        b = temporal_image_loss(1.0 - q_t, 1.0 - q_s, "sum")
        torch.testing.assert_close(a, b, rtol=1e-12, atol=0)


class TestTemporalInstanceLoss:
    def test_hand_value(self):
        r_s = [torch.tensor([0.3, 0.6], dtype=torch.float64)]
        v = temporal_instance_loss(r_s, [])
        assert float(v) == pytest.approx(1.27297, abs=1e-4)

    def test_source_optimum(self):
        r_s = [torch.full((5,), 1e-7, dtype=torch.float64)]
        assert float(temporal_instance_loss(r_s, [])) < 1e-5

    def test_zero_proposals_zero_loss(self):
        assert float(temporal_instance_loss([], [])) == 0.0
        empty = [torch.zeros(0, dtype=torch.float64)]
        assert float(temporal_instance_loss(empty, empty)) == 0.0

    def test_mean_over_samples(self):
        r1 = torch.tensor([0.3, 0.6], dtype=torch.float64)
        v = temporal_instance_loss([r1, torch.zeros(0, dtype=torch.float64)], [])
        assert float(v) == pytest.approx(1.27296567 / 2.0, abs=1e-6)


class TestLossBundle:
    def test_additivity_examples(self):
        b = LossBundle(2.0, 0.0, 0.0, 0.5, 1.0, 0.25, lam=1.0)
        assert b.l_adv == 1.75
        assert b.total == 3.75

    def test_component_order_invariance(self):
        b1 = LossBundle(0.1, 0.2, 0.3, 0.5, 1.0, 0.25, lam=0.7)
        assert b1.l_adv == 0.5 + 1.0 + 0.25

    @given(st.lists(st.floats(0, 100, allow_nan=False), min_size=7, max_size=7))
    @settings(max_examples=100)
    def test_log_line_round_trip(self, vals):
        b = LossBundle(*vals)
        step, parsed = parse_log_line(b.to_log_line(17))
        assert step == 17 and parsed == b
        assert parsed.total == b.total

    def test_tampered_derived_column_rejected(self):
        line = LossBundle(1.0, 2.0, 3.0, 0.1, 0.2, 0.3, 0.5).to_log_line(0)
        parts = line.split()
        parts[-1] = repr(float(parts[-1]) + 1.0)
        with pytest.raises(ValueError):
            parse_log_line(" ".join(parts))

    def test_log_file_round_trip(self, tmp_path):
        entries = [
            (i, LossBundle(*np.random.default_rng(i).uniform(0, 2, 7))) for i in range(5)
        ]
        path = tmp_path / "loss.log"
        write_loss_log(path, entries)
        assert read_loss_log(path) == entries
        header = path.read_text().splitlines()[0]
        assert header.split()[1:] == list(LOG_COLUMNS)

    def test_nan_abort_names_component(self):
        b = LossBundle(1.0, 2.0, math.nan)
        with pytest.raises(RuntimeError, match="l_reg"):
            b.check_finite(9)


def _mixed_batch(src, tgt, n=2, t=8):
    source = tuple(make_clip_sample(c, 4, t) for c in src[:n])
    target = tuple(make_target_sample(c, 4, t) for c in tgt[:n])
    return DomainBatch(source=source, target=target)


class TestObjective:
    def test_lambda_zero_total_is_l_act(self, domains):
        _, src, tgt = domains
        model = build_model(seed=1)
        batch = _mixed_batch(src, tgt)
        total, bundle = model.objective(batch, ModuleFlags.all_on(), AdaptationConfig(lam=0.0))
        assert bundle.total == bundle.l_act
        total.backward()
        for p in model.d_spatial.parameters():
            assert p.grad is not None and float(p.grad.abs().max()) == 0.0

    def test_all_components_populated(self, domains):
        _, src, tgt = domains
        model = build_model(seed=1)
        batch = _mixed_batch(src, tgt)
        _, bundle = model.objective(batch, ModuleFlags.all_on(), AdaptationConfig())
        assert bundle.l_ds > 0 and bundle.l_dtimg > 0 and bundle.l_dtinst > 0
        assert bundle.total == bundle.l_act + bundle.lam * bundle.l_adv

    def test_disabled_modules_exact_zero(self, domains):
        _, src, tgt = domains
        model = build_model(seed=1)
        batch = _mixed_batch(src, tgt)
        _, bundle = model.objective(batch, ModuleFlags(simg=True), AdaptationConfig())
        assert bundle.l_ds > 0.0
        assert bundle.l_dtimg == 0.0 and bundle.l_dtinst == 0.0

    def test_domain_batch_requires_both(self, domains):
        _, src, tgt = domains
        with pytest.raises(ValueError):
            DomainBatch(source=(), target=tuple(make_target_sample(c, 4, 8) for c in tgt[:1]))
        with pytest.raises(ValueError):
            DomainBatch(source=tuple(make_clip_sample(c, 4, 8) for c in src[:1]), target=())

    def test_lambda_factorization_oracle(self, domains):
        # post-hoc scaling (GRL 1, total = l_act + lam*l_adv) must give the
        # same feature gradients as GRL-side scaling (GRL lam, unscaled
        # l_adv), and discriminator gradients exactly lam times larger
        _, src, tgt = domains
        lam = 0.3
        batch = _mixed_batch(src, tgt)
        for s in batch.source:
            s.clip = s.clip.double()
            s.keyframe = s.keyframe.double()
        for s in batch.target:
            s.clip = s.clip.double()
            s.keyframe = s.keyframe.double()

        def run(grl_scale, loss_scale):
            model = build_model(seed=2).double()
            for grl in (model.grl_spatial, model.grl_temporal_image,
                        model.grl_temporal_instance):
                grl.lam = grl_scale
            features = model.localizer.forward_batch(batch.source, batch.target)
            adv = model.adversarial_losses(
                features, len(batch.source), ModuleFlags.all_on(), AdaptationConfig()
            )
            l_act = features["l_rpn"] + features["l_cls"] + features["l_reg"]
            l_adv = adv["l_ds"] + adv["l_dtimg"] + adv["l_dtinst"]
            (l_act + loss_scale * l_adv).backward()
            feat_grads = [
                p.grad.clone() if p.grad is not None else None
                for p in model.localizer.parameters()
            ]
            disc_grads = [
                p.grad.clone()
                for m in (model.d_spatial, model.d_temporal_image, model.d_temporal_instance)
                for p in m.parameters()
            ]
            return feat_grads, disc_grads

        feat_a, disc_a = run(grl_scale=1.0, loss_scale=lam)
        feat_b, disc_b = run(grl_scale=lam, loss_scale=1.0)
        for ga, gb in zip(feat_a, feat_b):
            if ga is None:
                assert gb is None
                continue
            torch.testing.assert_close(ga, gb, rtol=1e-6, atol=1e-12)
        for ga, gb in zip(disc_a, disc_b):
            torch.testing.assert_close(ga, lam * gb, rtol=1e-6, atol=1e-12)


class TestAdversarialDirection:
    def test_two_gaussian_min_max_signs(self):
        # one discriminator-favorable step lowers the domain loss; one
        # feature step (through the reversal) raises it
        torch.manual_seed(7)
        feat = nn.Linear(2, 2)
        disc = nn.Sequential(nn.Linear(2, 8), nn.ReLU(), nn.Linear(8, 1))
        grl = GradientReversal(1.0)
        xs = torch.randn(64, 2) - 1.5
        xt = torch.randn(64, 2) + 1.5

        def loss():
            ps = torch.sigmoid(disc(grl(feat(xs))))[:, 0]
            pt = torch.sigmoid(disc(grl(feat(xt))))[:, 0]
            return spatial_domain_loss(ps, pt, gamma=0.0)

        opt_d = torch.optim.SGD(disc.parameters(), lr=0.1)
        before = float(loss().detach())
        opt_d.zero_grad()
        loss().backward()
        opt_d.step()
        after_disc = float(loss().detach())
        assert after_disc < before

        opt_f = torch.optim.SGD(feat.parameters(), lr=0.1)
        opt_f.zero_grad()
        loss().backward()
        opt_f.step()
        after_feat = float(loss().detach())
        assert after_feat > after_disc


class TestTraining:
    def test_pretrain_logs_and_determinism(self, domains, tmp_path):
        _, src, _ = domains
        cfg = tiny_cfg()

        def run():
            model = build_model(seed=4)
            return pretrain(model, src, cfg)

        a = run()
        b = run()
        assert a == b
        assert len(a) == cfg.pretrain_steps
        assert all(bundle.lam == 0.0 for _, bundle in a)
        path = tmp_path / "pre.log"
        write_loss_log(path, a)
        assert read_loss_log(path) == a

    def test_flags_off_adapt_is_source_only_continuation(self, domains):
        _, src, tgt = domains
        cfg = tiny_cfg()

        model_a = build_model(seed=5)
        pretrain(model_a, src, cfg)
        entries_a = adapt(model_a, src, tgt, cfg, AdaptationConfig(), ModuleFlags())

        model_b = build_model(seed=5)
        pretrain(model_b, src, cfg)
        entries_b = source_only_steps(
            model_b, src, cfg, cfg.adapt_lr, cfg.adapt_steps, start_step=cfg.pretrain_steps
        )
        assert entries_a == entries_b

    def test_adapt_determinism_bitwise(self, domains):
        _, src, tgt = domains
        cfg = tiny_cfg()

        def run():
            model = build_model(seed=6)
            pretrain(model, src, cfg)
            return adapt(model, src, tgt, cfg, AdaptationConfig(), ModuleFlags.all_on())

        assert run() == run()

    def test_adapt_requires_target_when_enabled(self, domains):
        _, src, _ = domains
        model = build_model(seed=6)
        with pytest.raises(ValueError, match="both domains"):
            adapt(model, src, [], tiny_cfg(), AdaptationConfig(), ModuleFlags.all_on())

    def test_step_numbering_continues(self, domains):
        _, src, tgt = domains
        cfg = tiny_cfg()
        model = build_model(seed=6)
        pre = pretrain(model, src, cfg)
        ad = adapt(model, src, tgt, cfg, AdaptationConfig(), ModuleFlags.all_on())
        assert [s for s, _ in pre] == [0, 1, 2]
        assert [s for s, _ in ad] == [3, 4, 5]

    def test_flag_off_purity(self, domains):
        _, src, tgt = domains
        cfg = tiny_cfg()
        model = build_model(seed=7)
        before_timg = copy.deepcopy(model.d_temporal_image.state_dict())
        before_tinst = copy.deepcopy(model.d_temporal_instance.state_dict())
        entries = adapt(model, src, tgt, cfg, AdaptationConfig(), ModuleFlags(simg=True))
        for k, v in model.d_temporal_image.state_dict().items():
            assert torch.equal(v, before_timg[k])
        for k, v in model.d_temporal_instance.state_dict().items():
            assert torch.equal(v, before_tinst[k])
        assert all(b.l_dtimg == 0.0 and b.l_dtinst == 0.0 for _, b in entries)
        assert any(b.l_ds != 0.0 for _, b in entries)

    def test_unsupervised_contract_annotations_deleted(self, domains, tmp_path):
        root, src, _ = domains

        def run(target_root):
            tgt = load_dataset(target_root, mode="target")
            model = build_model(seed=8)
            cfg = tiny_cfg(adapt_steps=2)
            pretrain(model, src, cfg)
            return adapt(model, src, tgt, cfg, AdaptationConfig(), ModuleFlags.all_on())

        import shutil

        stripped = tmp_path / "tgt_stripped"
        shutil.copytree(root / "tgt", stripped)
        (stripped / "annotations.csv").unlink()
        assert run(root / "tgt") == run(stripped)

    def test_nan_abort_during_training(self, domains):
        _, src, tgt = domains
        model = build_model(seed=9)

        def poisoned(sf_map):
            return torch.full((sf_map.shape[0],), math.nan)

        model.d_spatial.forward = poisoned
        with pytest.raises(RuntimeError, match="l_ds"):
            adapt(model, src, tgt, tiny_cfg(), AdaptationConfig(), ModuleFlags(simg=True))


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        model = build_model(seed=10)
        meta = {"phase": "pretrain", "step": "3", "encoder.sf_channels": "32"}
        path = save_checkpoint(tmp_path / "ck.npz", model, meta)
        meta2, arrays = read_checkpoint(path)
        assert meta2 == meta
        other = build_model(seed=11)
        load_into(other, arrays)
        for (ka, va), (kb, vb) in zip(
            model.state_dict().items(), other.state_dict().items()
        ):
            assert ka == kb
            assert torch.equal(va, vb)

    def test_mismatched_architecture_rejected(self, tmp_path):
        model = build_model(seed=10)
        path = save_checkpoint(tmp_path / "ck.npz", model, {})
        _, arrays = read_checkpoint(path)
        small = build_model(EncoderConfig(sf_channels=16), seed=0)
        with pytest.raises(ValueError, match="mismatch|match"):
            load_into(small, arrays)

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            read_checkpoint(tmp_path / "nope.npz")
