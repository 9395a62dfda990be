"""Optimizer, checkpoint format, AP evaluation, and training-loop contracts."""

import os

import numpy as np
import pytest

from kaseq import amalgamation as ka
from kaseq import traineval as tv
from kaseq.data import Dataset, TaskPartition, generate_dataset
from kaseq.detector import DetectorConfig, DetectorParams
from kaseq.errors import ContractError, DataFormatError, NumericError
from kaseq.tensor import Tensor

RNG = np.random.default_rng(23)


def tiny_cfg(**kw):
    base = dict(image_size=32, patch_size=8, d_model=16, heads=2, enc_layers=2,
                dec_layers=1, queries=8, num_categories=8, num_parts=1, ffn_dim=32)
    base.update(kw)
    return DetectorConfig(**base)


@pytest.fixture(scope="module")
def tiny_train():
    return generate_dataset(count=24, num_categories=8, image_size=32, seed=5)


@pytest.fixture(scope="module")
def tiny_eval():
    return generate_dataset(count=8, num_categories=8, image_size=32, seed=6)


@pytest.fixture(scope="module")
def tiny_teachers(tiny_train):
    part = TaskPartition.equal_split(8, 2)
    cfg = tiny_cfg()
    return [tv.train_teacher(tiny_train, part, t, cfg, epochs=1, seed=t,
                             batch_size=8)[0] for t in range(2)]


class TestAdamW:
    def test_zero_grad_zero_decay_is_fixed_point(self):
        p = Tensor(RNG.standard_normal((3, 3)), requires_grad=True)
        before = p.data.copy()
        opt = tv.AdamW({"p": p}, tv.OptimSettings(lr=0.1, weight_decay=0.0))
        opt.step()
        np.testing.assert_array_equal(p.data, before)

    def test_single_scalar_step_matches_hand_computation(self):
        p = Tensor(np.asarray([[1.0]]), requires_grad=True)
        p.grad = np.asarray([[0.5]])
        s = tv.OptimSettings(lr=0.01, weight_decay=0.0)
        tv.AdamW({"p": p}, s).step()
        m_hat = (0.1 * 0.5) / (1 - 0.9)
        v_hat = (0.001 * 0.25) / (1 - 0.999)
        expected = 1.0 - 0.01 * m_hat / (np.sqrt(v_hat) + s.eps)
        assert p.data[0, 0] == pytest.approx(expected, rel=1e-12)

    def test_decay_only_shrinks_multiplicatively(self):
        p = Tensor(np.asarray([[2.0]]), requires_grad=True)
        s = tv.OptimSettings(lr=0.05, weight_decay=0.2)
        tv.AdamW({"p": p}, s).step()
        assert p.data[0, 0] == pytest.approx(2.0 * (1 - 0.05 * 0.2), rel=1e-12)

    def test_lr_schedule_decays_at_two_thirds(self):
        assert tv.lr_scale_for_epoch(0, 30) == 1.0
        assert tv.lr_scale_for_epoch(19, 30) == 1.0
        assert tv.lr_scale_for_epoch(20, 30) == 0.1
        assert tv.lr_scale_for_epoch(29, 30) == 0.1


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        cfg = tiny_cfg(num_parts=2)
        params = DetectorParams.init(cfg, RNG)
        ckpt = tv.make_checkpoint(params, cfg, {"seed": 1, "note": "x"})
        path = str(tmp_path / "model.ckpt")
        tv.save_checkpoint(ckpt, path)
        loaded = tv.load_checkpoint(path)
        assert loaded.config == cfg
        assert loaded.metadata["note"] == "x"
        assert set(loaded.tensors) == set(ckpt.tensors)
        for name in ckpt.tensors:
            np.testing.assert_array_equal(loaded.tensors[name], ckpt.tensors[name])
        rebuilt, _ = tv.detector_from_checkpoint(loaded)
        for name, p in rebuilt.named_parameters().items():
            np.testing.assert_array_equal(p.data, ckpt.tensors[name])

    def test_corrupt_magic_rejected(self, tmp_path):
        path = str(tmp_path / "bad.ckpt")
        with open(path, "wb") as fh:
            fh.write(b"NOPE" + b"\0" * 100)
        with pytest.raises(DataFormatError, match="magic"):
            tv.load_checkpoint(path)

    def test_truncated_payload_rejected(self, tmp_path):
        cfg = tiny_cfg()
        ckpt = tv.make_checkpoint(DetectorParams.init(cfg, RNG), cfg)
        path = str(tmp_path / "model.ckpt")
        tv.save_checkpoint(ckpt, path)
        with open(path, "rb") as fh:
            raw = fh.read()
        with open(path, "wb") as fh:
            fh.write(raw[:-16])
        with pytest.raises(DataFormatError, match="truncated|trailing"):
            tv.load_checkpoint(path)

    def test_byte_length_matches_documented_layout(self, tmp_path):
        import json as _json
        import struct as _struct
        rng = np.random.default_rng(77)
        for trial in range(50):
            cfg = tiny_cfg(d_model=8, heads=2, enc_layers=1, dec_layers=1,
                           ffn_dim=8, queries=int(rng.integers(1, 5)),
                           num_parts=int(rng.integers(1, 4)))
            ckpt = tv.make_checkpoint(DetectorParams.init(cfg, rng), cfg)
            path = str(tmp_path / f"m{trial}.ckpt")
            tv.save_checkpoint(ckpt, path)
            raw = open(path, "rb").read()
            assert raw[:4] == b"KASQ"
            (version,) = _struct.unpack_from("<I", raw, 4)
            (hlen,) = _struct.unpack_from("<I", raw, 8)
            assert version == 1
            header = _json.loads(raw[12:12 + hlen])
            payload = sum(8 * int(np.prod(e["shape"])) for e in header["tensors"])
            assert len(raw) == 12 + hlen + payload


class TestAPMachinery:
    def test_perfect_predictions_give_unit_ap(self):
        gts = {0: [np.array([0.1, 0.1, 0.5, 0.5])], 1: [np.array([0.2, 0.2, 0.8, 0.8])]}
        preds = [(1.0, img, 0, boxes[0]) for img, boxes in gts.items()]
        for thr in tv.IOU_THRESHOLDS:
            assert tv.category_ap(preds, gts, thr) == pytest.approx(1.0)

    def test_no_predictions_give_zero_ap(self):
        gts = {0: [np.array([0.1, 0.1, 0.5, 0.5])]}
        assert tv.category_ap([], gts, 0.5) == 0.0

    def test_no_ground_truth_skips_category(self):
        assert tv.category_ap([(0.9, 0, 0, np.zeros(4))], {}, 0.5) is None

    def test_hand_built_false_positive_scenario(self):
        # Three images, one GT each; predictions: two exact hits (scores .9,
        # .8) and one miss at score .85. Ranking: TP, FP, TP.
        g1 = np.array([0.10, 0.10, 0.40, 0.40])
        g2 = np.array([0.20, 0.20, 0.60, 0.60])
        g3 = np.array([0.50, 0.50, 0.90, 0.90])
        gts = {0: [g1], 1: [g2], 2: [g3]}
        preds = [(0.9, 0, 0, g1), (0.85, 1, 0, np.array([0.7, 0.7, 0.9, 0.9])),
                 (0.8, 2, 0, g3)]
        # Precision after each rank: 1, 1/2, 2/3; recalls: 1/3, 1/3, 2/3.
        # 101-point AP: recall in [0, 1/3] -> max precision 1 (34 points);
        # (1/3, 2/3] -> 2/3 (33 points); beyond 2/3 -> 0.
        expected = (34 * 1.0 + 33 * (2.0 / 3.0)) / 101.0
        assert tv.category_ap(preds, gts, 0.5) == pytest.approx(expected, abs=1e-12)

    def test_removing_false_positive_never_decreases_ap(self):
        g = np.array([0.1, 0.1, 0.5, 0.5])
        gts = {0: [g]}
        with_fp = [(0.9, 0, 0, g), (0.95, 0, 1, np.array([0.6, 0.6, 0.9, 0.9]))]
        without = [(0.9, 0, 0, g)]
        assert tv.category_ap(without, gts, 0.5) >= tv.category_ap(with_fp, gts, 0.5)


class TestEvaluate:
    def test_untrained_model_report_is_valid(self, tiny_eval):
        cfg = tiny_cfg()
        ckpt = tv.make_checkpoint(DetectorParams.init(cfg, RNG), cfg)
        part = TaskPartition.equal_split(8, 2)
        report = tv.evaluate(ckpt, tiny_eval, partition=part)
        for value in (report.ap, report.ap50, report.ap75):
            assert 0.0 <= value <= 1.0
        assert report.ap <= report.ap50 + 1e-12

    def test_evaluation_is_order_independent(self, tiny_eval):
        cfg = tiny_cfg()
        ckpt = tv.make_checkpoint(DetectorParams.init(cfg, RNG), cfg)
        base = tv.evaluate(ckpt, tiny_eval)
        perm = np.random.default_rng(3).permutation(len(tiny_eval))
        shuffled = Dataset([tiny_eval.image(i) for i in perm],
                           [tiny_eval._annotations[i] for i in perm],
                           tiny_eval.num_categories, tiny_eval.image_size)
        again = tv.evaluate(ckpt, shuffled)
        assert again.ap == pytest.approx(base.ap, abs=1e-12)
        assert again.ap50 == pytest.approx(base.ap50, abs=1e-12)

    def test_evaluate_does_not_mutate_parameters(self, tiny_eval):
        cfg = tiny_cfg()
        params = DetectorParams.init(cfg, RNG)
        ckpt = tv.make_checkpoint(params, cfg)
        before = {k: v.copy() for k, v in ckpt.tensors.items()}
        tv.evaluate(ckpt, tiny_eval)
        for k in before:
            np.testing.assert_array_equal(ckpt.tensors[k], before[k])


class TestTrainingLoops:
    def test_teacher_training_runs_and_logs(self, tiny_train, tiny_eval, tmp_path):
        part = TaskPartition.equal_split(8, 2)
        csv_path = str(tmp_path / "teacher.csv")
        ckpt, losses = tv.train_teacher(
            tiny_train, part, 0, tiny_cfg(), epochs=2, seed=0,
            eval_ds=tiny_eval, batch_size=8, csv_path=csv_path,
            opt_settings=tv.OptimSettings(lr=1e-3))
        assert len(losses) == 2 and all(np.isfinite(losses))
        assert ckpt.metadata["task_subset"] == [1, 2, 3, 4]
        assert ckpt.config.num_categories == 4
        rows = open(csv_path).read().strip().splitlines()
        assert rows[0].split(",") == tv.METRICS_COLUMNS
        assert len(rows) == 3

    def test_deterministic_loss_trajectory_under_fixed_seed(self, tiny_train):
        part = TaskPartition.equal_split(8, 2)
        _, a = tv.train_teacher(tiny_train, part, 1, tiny_cfg(), epochs=2, seed=9,
                                batch_size=8)
        _, b = tv.train_teacher(tiny_train, part, 1, tiny_cfg(), epochs=2, seed=9,
                                batch_size=8)
        assert a == b

    @pytest.mark.parametrize("mode,parts,compression", [
        ("sa", 2, "none"), ("ta", 2, "none"), ("sa+ta", 2, "redundancy"),
        ("sag", 1, "none")])
    def test_amalgamation_modes_run(self, tiny_train, tiny_teachers, tmp_path,
                                    mode, parts, compression):
        cfg = tiny_cfg(num_parts=parts, compression=compression)
        csv_path = str(tmp_path / f"{mode}.csv")
        ckpt = tv.amalgamate(tiny_teachers, tiny_train, cfg, mode, epochs=1,
                             seed=3, batch_size=8, csv_path=csv_path)
        assert ckpt.metadata["mode"].startswith(mode)
        assert len(open(csv_path).read().strip().splitlines()) == 2

    def test_live_teacher_path_matches_cache_path(self, tiny_train, tiny_teachers):
        cfg = tiny_cfg(num_parts=2)
        cached = tv.amalgamate(tiny_teachers, tiny_train, cfg, "sa", epochs=1,
                               seed=3, batch_size=8, use_cache=True)
        live = tv.amalgamate(tiny_teachers, tiny_train, cfg, "sa", epochs=1,
                             seed=3, batch_size=8, use_cache=False)
        for name in cached.tensors:
            np.testing.assert_allclose(cached.tensors[name], live.tensors[name],
                                       atol=1e-4)

    def test_label_free_never_reads_annotations(self, tiny_teachers):
        fresh = generate_dataset(count=16, num_categories=8, image_size=32, seed=44)
        cfg = tiny_cfg(num_parts=2)
        assert fresh.annotation_reads == 0
        tv.amalgamate(tiny_teachers, fresh, cfg, "sa+ta", epochs=1, seed=0,
                      batch_size=8, label_free=True)
        assert fresh.annotation_reads == 0
        tv.amalgamate(tiny_teachers, fresh, cfg, "sa+ta", epochs=1, seed=0,
                      batch_size=8, label_free=False)
        assert fresh.annotation_reads > 0

    def test_overlapping_teacher_partitions_rejected(self, tiny_train, tiny_teachers):
        bad = tv.Checkpoint(config=tiny_teachers[0].config,
                            tensors=dict(tiny_teachers[0].tensors),
                            metadata=dict(tiny_teachers[0].metadata))
        bad.metadata["task_subset"] = [1, 2, 3, 4]  # same as teacher 0
        with pytest.raises(ContractError):
            tv.amalgamate([tiny_teachers[0], bad], tiny_train,
                          tiny_cfg(num_parts=2), "sa", epochs=1, seed=0)

    def test_sag_forbids_extension(self, tiny_train, tiny_teachers):
        with pytest.raises(Exception):
            tv.amalgamate(tiny_teachers, tiny_train, tiny_cfg(num_parts=2),
                          "sag", epochs=1, seed=0)

    def test_nan_guard_dumps_and_raises(self, tiny_train, tmp_path):
        cfg = tiny_cfg()
        dump = str(tmp_path / "crash.ckpt")
        with pytest.raises(NumericError):
            tv.train_detector_gt(tiny_train, cfg, epochs=1, seed=0,
                                 category_ids=list(range(1, 9)),
                                 opt_settings=tv.OptimSettings(lr=1e300),
                                 batch_size=8, crash_dump=dump)
        assert os.path.exists(dump)
        tv.load_checkpoint(dump)


class TestRedundancyAnalysis:
    def test_contracts_and_histogram(self, tiny_eval):
        cfg = tiny_cfg(num_parts=2)
        ckpt = tv.make_checkpoint(DetectorParams.init(cfg, RNG), cfg)
        report = tv.analyze_redundancy(ckpt, tiny_eval)
        assert report.counts.sum() == report.token_count
        assert report.token_count == len(tiny_eval) * 2 * cfg.tokens
        assert report.bin_lows.shape == (41,)
        assert report.bin_lows[0] == -1.0 and report.bin_lows[-1] == pytest.approx(1.0)
        assert 0.0 <= report.fraction_above_half <= 1.0

    def test_single_part_model_rejected(self, tiny_eval):
        cfg = tiny_cfg()
        ckpt = tv.make_checkpoint(DetectorParams.init(cfg, RNG), cfg)
        with pytest.raises(ContractError):
            tv.analyze_redundancy(ckpt, tiny_eval)
