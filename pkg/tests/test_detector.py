"""Detector forward: patch embedding, extension, compression, heads."""

import numpy as np
import pytest

from kaseq import detector as det
from kaseq import tensor as T
from kaseq.errors import ConfigError, ContractError
from kaseq.tensor import Tensor

RNG = np.random.default_rng(17)


def tiny_cfg(**kw):
    base = dict(image_size=32, patch_size=8, d_model=16, heads=2, enc_layers=2,
                dec_layers=1, queries=6, num_categories=4, num_parts=1,
                ffn_dim=32)
    base.update(kw)
    return det.DetectorConfig(**base)


def rand_image(size=32):
    return RNG.uniform(0, 1, size=(size, size, 3))


class TestConfig:
    def test_indivisible_image_rejected(self):
        with pytest.raises(ConfigError):
            tiny_cfg(image_size=30)

    def test_grid_arithmetic(self):
        cfg = tiny_cfg()
        assert cfg.grid == 4 and cfg.tokens == 16 and cfg.patch_dim == 192

    def test_round_trip_dict(self):
        cfg = tiny_cfg(num_parts=2, compression="redundancy")
        assert det.DetectorConfig.from_dict(cfg.to_dict()) == cfg


class TestBackbone:
    def test_patch_count_and_width(self):
        cfg = tiny_cfg()
        params = det.DetectorParams.init(cfg, RNG)
        seq = det.backbone_project(rand_image(), params, cfg, 0)
        assert seq.shape == (16, cfg.d_model)

    def test_identical_parameters_identical_sequences(self):
        cfg = tiny_cfg(num_parts=2)
        params = det.DetectorParams.init(cfg, RNG)
        params.proj_w[1].data[:] = params.proj_w[0].data
        params.proj_b[1].data[:] = params.proj_b[0].data
        img = rand_image()
        a = det.backbone_project(img, params, cfg, 0)
        b = det.backbone_project(img, params, cfg, 1)
        np.testing.assert_array_equal(a.data, b.data)

    def test_gradient_isolated_to_used_projection(self):
        cfg = tiny_cfg(num_parts=2)
        params = det.DetectorParams.init(cfg, RNG)
        seq = det.backbone_project(rand_image(), params, cfg, 1)
        T.frobenius_sq(seq).backward()
        assert params.proj_w[1].grad is not None
        assert params.proj_w[0].grad is None

    def test_patch_flattening_layout(self):
        img = np.arange(32 * 32 * 3, dtype=np.float64).reshape(32, 32, 3)
        patches = det.image_to_patches(img, 8)
        assert patches.shape == (16, 192)
        np.testing.assert_array_equal(patches[0], img[:8, :8, :].reshape(-1))
        np.testing.assert_array_equal(patches[1], img[:8, 8:16, :].reshape(-1))


class TestStudentForward:
    def test_single_part_plain_forward(self):
        cfg = tiny_cfg()
        params = det.DetectorParams.init(cfg, RNG)
        dets, layers = det.student_forward(rand_image(), params, cfg)
        assert len(dets) == cfg.queries
        assert len(layers) == cfg.enc_layers + 1  # projection supervised by default
        assert layers[0].shape == (cfg.tokens, cfg.d_model)

    def test_memory_lengths_with_and_without_compression(self):
        img = rand_image()
        cfg2 = tiny_cfg(num_parts=2)
        params = det.DetectorParams.init(cfg2, RNG)
        out = det.forward_batch([img], params, cfg2)
        assert out.memory_len == 2 * cfg2.tokens
        cfg2c = tiny_cfg(num_parts=2, compression="redundancy")
        out_c = det.forward_batch([img], params, cfg2c)
        assert out_c.memory_len == cfg2c.tokens  # reduced from N*n to n
        assert out_c.p_slims is not None and out_c.p_slims[0].shape == (cfg2c.tokens,)

    def test_outputs_are_valid_detections(self):
        cfg = tiny_cfg(num_parts=2, compression="isometric")
        params = det.DetectorParams.init(cfg, RNG)
        dets, _ = det.student_forward(rand_image(), params, cfg)
        assert np.all(dets.boxes >= 0.0) and np.all(dets.boxes <= 1.0)
        np.testing.assert_allclose(dets.dists.sum(axis=1), 1.0, atol=1e-9)

    def test_part_outputs_independent_of_sibling_parameters(self):
        # Flow is cut between parts: retuning part 1's projection must leave
        # part 0's per-layer outputs untouched.
        cfg = tiny_cfg(num_parts=2)
        img = rand_image()
        params = det.DetectorParams.init(cfg, RNG)
        _, layers_before = det.student_forward(img, params, cfg)
        params.proj_w[1].data[:] = RNG.standard_normal(params.proj_w[1].shape)
        _, layers_after = det.student_forward(img, params, cfg)
        n = cfg.tokens
        for before, after in zip(layers_before, layers_after):
            np.testing.assert_allclose(after.data[:n], before.data[:n], atol=1e-12)
            assert np.max(np.abs(after.data[n:] - before.data[n:])) > 1e-6

    def test_forward_is_deterministic(self):
        cfg = tiny_cfg(num_parts=2, compression="redundancy")
        params = det.DetectorParams.init(cfg, RNG)
        img = rand_image()
        a, _ = det.student_forward(img, params, cfg)
        b, _ = det.student_forward(img, params, cfg)
        np.testing.assert_array_equal(a.dists, b.dists)
        np.testing.assert_array_equal(a.boxes, b.boxes)

    def test_batched_forward_matches_single_image(self):
        cfg = tiny_cfg(num_parts=2)
        params = det.DetectorParams.init(cfg, RNG)
        imgs = [rand_image() for _ in range(3)]
        batched = det.forward_batch(imgs, params, cfg)
        for b, img in enumerate(imgs):
            solo, solo_layers = det.student_forward(img, params, cfg)
            got = batched.image_detections(b)
            np.testing.assert_allclose(got.dists, solo.dists, atol=1e-10)
            np.testing.assert_allclose(got.boxes, solo.boxes, atol=1e-10)
            rows = batched.layer_seqs[0].shape[0] // len(imgs)
            np.testing.assert_allclose(
                batched.layer_seqs[-1].data[b * rows:(b + 1) * rows],
                solo_layers[-1].data, atol=1e-10)

    def test_external_pslim_is_honored(self):
        cfg = tiny_cfg(num_parts=2, compression="redundancy")
        params = det.DetectorParams.init(cfg, RNG)
        n = cfg.tokens
        p_slim = np.arange(n)  # keep part 0 wholesale
        out = det.forward_batch([rand_image()], params, cfg, p_slims=[p_slim])
        np.testing.assert_array_equal(out.p_slims[0], p_slim)


class TestTeacherForward:
    def test_contracts(self):
        cfg = tiny_cfg(num_categories=2)
        params = det.DetectorParams.init(cfg, RNG)
        dets, layers = det.teacher_forward(rand_image(), params, cfg)
        assert len(dets) == cfg.queries
        assert dets.dists.shape[1] == 3
        assert len(layers) == cfg.enc_layers + 1

    def test_multi_part_teacher_rejected(self):
        cfg = tiny_cfg(num_parts=2)
        params = det.DetectorParams.init(cfg, RNG)
        with pytest.raises(ContractError):
            det.teacher_forward(rand_image(), params, cfg)


class TestParameterAccounting:
    def test_extension_adds_only_projections(self):
        raw = det.DetectorParams.init(tiny_cfg(num_parts=1), np.random.default_rng(0))
        ext = det.DetectorParams.init(tiny_cfg(num_parts=3), np.random.default_rng(0))
        cfg = tiny_cfg()
        per_proj = cfg.patch_dim * cfg.d_model + cfg.d_model
        assert ext.parameter_count() - raw.parameter_count() == 2 * per_proj

    def test_named_parameters_unique_and_complete(self):
        params = det.DetectorParams.init(tiny_cfg(num_parts=2), RNG)
        named = params.named_parameters()
        assert len(named) == len(set(named))
        total = sum(p.data.size for p in named.values())
        assert total == params.parameter_count()

    def test_split_parts_round_trip(self):
        cfg = tiny_cfg(num_parts=2)
        params = det.DetectorParams.init(cfg, RNG)
        out = det.forward_batch([rand_image()], params, cfg)
        parts = det.split_parts(out.layer_seqs[0], 2)
        np.testing.assert_array_equal(
            np.vstack([p.data for p in parts]), out.layer_seqs[0].data)
