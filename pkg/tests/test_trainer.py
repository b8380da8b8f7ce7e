"""Adam oracle, warm starts, alternating streams, and run artifacts."""

import csv
import json
import math

import numpy as np
import pytest

from codistill import datagen as D
from codistill import model as M
from codistill import trainer as TR
from codistill.tokenizer import train_vocab


class TestAdam:
    def test_scalar_hand_oracle(self):
        """One param, g=1, lr=0.1: first update is -0.1 * 1/(1 + 1e-8)."""
        theta = {"x": np.array([0.0])}
        adam = TR.Adam({"x": (1,)}, beta1=0.9, beta2=0.999, eps=1e-8)
        adam.step(theta, {"x": np.array([1.0])}, lr=0.1)
        m_hat = 0.1 / (1 - 0.9)
        v_hat = 0.001 / (1 - 0.999)
        expected = -0.1 * m_hat / (math.sqrt(v_hat) + 1e-8)
        assert theta["x"][0] == pytest.approx(expected, rel=1e-12)
        assert theta["x"][0] == pytest.approx(-0.1 / (1.0 + 1e-8), rel=1e-9)

    def test_two_steps_track_recurrence(self):
        theta = {"x": np.array([1.0])}
        adam = TR.Adam({"x": (1,)})
        m = v = 0.0
        ref = 1.0
        for t, g in enumerate([0.5, -1.5], start=1):
            adam.step(theta, {"x": np.array([g])}, lr=0.01)
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            ref -= 0.01 * (m / (1 - 0.9**t)) / (math.sqrt(v / (1 - 0.999**t)) + 1e-8)
            assert theta["x"][0] == pytest.approx(ref, rel=1e-12)

    def test_zero_lr_leaves_params(self):
        theta = {"x": np.array([3.0])}
        adam = TR.Adam({"x": (1,)})
        adam.step(theta, {"x": np.array([2.0])}, lr=0.0)
        assert theta["x"][0] == 3.0


@pytest.fixture(scope="module")
def train_setup(small_corpora, vocab, bridge):
    noisy_recs, clean_recs = small_corpora
    cfg = M.ModelConfig(vocab_size=len(vocab), feature_dim=D.FEATURE_DIM,
                        layers=1, embed_dim=16, heads=2, max_positions=32)
    noisy = TR.samples_from_records(noisy_recs, vocab, "noisy")
    clean = TR.samples_from_records(clean_recs, vocab, "clean")
    return cfg, noisy, clean


class TestPretrain:
    def test_zero_steps_returns_params_unchanged(self, train_setup):
        cfg, noisy, _ = train_setup
        params = M.init_params(cfg, seed=1)
        out = TR.pretrain(params, noisy, TR.TrainConfig(seed=1), steps=0)
        for name in params.tensors:
            np.testing.assert_array_equal(out.tensors[name], params.tensors[name])

    def test_input_params_not_mutated(self, train_setup):
        cfg, noisy, _ = train_setup
        params = M.init_params(cfg, seed=1)
        before = {k: v.copy() for k, v in params.tensors.items()}
        TR.pretrain(params, noisy, TR.TrainConfig(seed=1, batch_size=4), steps=3)
        for name in before:
            np.testing.assert_array_equal(params.tensors[name], before[name])

    def test_deterministic_bitwise(self, train_setup):
        cfg, noisy, _ = train_setup
        params = M.init_params(cfg, seed=1)
        tcfg = TR.TrainConfig(seed=5, batch_size=4)
        a = TR.pretrain(params, noisy, tcfg, steps=5)
        b = TR.pretrain(params, noisy, tcfg, steps=5)
        for name in a.tensors:
            np.testing.assert_array_equal(a.tensors[name], b.tensors[name])

    def test_overfits_single_repeated_batch(self, train_setup, vocab, bridge):
        """500 steps on one 4-sample batch drive CE below a tenth of its start."""
        cfg, noisy, _ = train_setup
        from codistill.losses import cross_entropy_seq
        from codistill.tokenizer import BOS_ID, EOS_ID

        batch = noisy[:4]
        params = M.init_params(cfg, seed=2)

        def ce_of(p):
            total = 0.0
            for s in batch:
                gt = list(s.gt_tokens)
                rows = M.forward(p, s.features, [BOS_ID] + gt)
                total += cross_entropy_seq(rows, gt + [EOS_ID])
            return total / len(batch)

        initial = ce_of(params)
        trained = TR.pretrain(params, batch,
                              TR.TrainConfig(seed=2, batch_size=4, lr=1e-3, warmup_steps=50),
                              steps=500)
        assert ce_of(trained) < 0.1 * initial

    def test_empty_dataset_errors(self, train_setup):
        cfg, _, _ = train_setup
        params = M.init_params(cfg, seed=1)
        with pytest.raises(ValueError, match="empty dataset"):
            TR.pretrain(params, [], TR.TrainConfig(), steps=1)


class TestCodistillStep:
    def test_zero_lr_reports_but_does_not_move(self, train_setup, vocab, bridge):
        cfg, noisy, clean = train_setup
        tcfg = TR.TrainConfig(seed=3, batch_size=2, lr=0.0, max_decode_len=8)
        state = TR.init_state(cfg, tcfg)
        before_s = {k: v.copy() for k, v in state.student.tensors.items()}
        before_t = {k: v.copy() for k, v in state.teacher.tensors.items()}
        results = TR.codistill_step(state, noisy[:2], clean[:2], bridge, vocab, tcfg)
        assert len(results) == 2
        for (loss, reports) in results:
            assert math.isfinite(loss) and len(reports) == 2
        for name in before_s:
            np.testing.assert_array_equal(state.student.tensors[name], before_s[name])
            np.testing.assert_array_equal(state.teacher.tensors[name], before_t[name])

    def test_freeze_contract_bitwise(self, train_setup, vocab, bridge):
        """Teacher frozen through denoise sub-steps; student frozen through diversity."""
        cfg, noisy, clean = train_setup
        tcfg = TR.TrainConfig(seed=4, batch_size=2, max_decode_len=8)
        state = TR.init_state(cfg, tcfg)
        for step in range(3):
            teacher_bytes = {k: v.tobytes() for k, v in state.teacher.tensors.items()}
            TR.stream_substep(state, noisy[:2], bridge, vocab, tcfg, "denoise")
            assert all(state.teacher.tensors[k].tobytes() == b
                       for k, b in teacher_bytes.items())
            student_bytes = {k: v.tobytes() for k, v in state.student.tensors.items()}
            TR.stream_substep(state, clean[:2], bridge, vocab, tcfg, "diversity")
            assert all(state.student.tensors[k].tobytes() == b
                       for k, b in student_bytes.items())

    def test_batch_loss_is_mean_of_sample_totals(self, train_setup, vocab, bridge):
        cfg, noisy, clean = train_setup
        tcfg = TR.TrainConfig(seed=5, batch_size=4, max_decode_len=8)
        state = TR.init_state(cfg, tcfg)
        loss, reports = TR.stream_substep(state, noisy[:4], bridge, vocab, tcfg, "denoise")
        assert loss == pytest.approx(np.mean([r.total for r in reports]), abs=1e-9)

    def test_metrics_fields_valid(self, train_setup, vocab, bridge):
        cfg, noisy, clean = train_setup
        tcfg = TR.TrainConfig(seed=6, batch_size=2, steps=2, pretrain_steps=0,
                              max_decode_len=8, checkpoint_every=0)
        res = TR.train_codistill(cfg, tcfg, noisy[:8], clean[:8], bridge, vocab)
        assert len(res.metrics) == 2 * tcfg.steps  # two rows per step
        for row in res.metrics:
            assert row["stream"] in ("denoise", "diversity")
            for key in ("loss", "ce", "kl", "w_mean", "w_min", "w_max"):
                assert math.isfinite(float(row[key]))
            assert 0.0 <= float(row["w_min"]) <= float(row["w_mean"]) <= float(row["w_max"]) <= 1.0


class TestTrainCodistill:
    def test_zero_steps_writes_warm_start_only(self, train_setup, vocab, bridge, tmp_path):
        cfg, noisy, clean = train_setup
        tcfg = TR.TrainConfig(seed=7, batch_size=2, steps=0, pretrain_steps=2,
                              max_decode_len=8)
        run = tmp_path / "run"
        TR.train_codistill(cfg, tcfg, noisy[:4], clean[:4], bridge, vocab, run_dir=run)
        names = sorted(p.name for p in (run / "checkpoints").iterdir())
        assert names == ["student_0.ckpt", "teacher_0.ckpt"]
        assert (run / "metrics.csv").read_text().splitlines()[0].startswith("step,")

    def test_determinism_byte_identical_artifacts(self, train_setup, vocab, bridge, tmp_path):
        cfg, noisy, clean = train_setup
        tcfg = TR.TrainConfig(seed=8, batch_size=2, steps=3, pretrain_steps=2,
                              max_decode_len=8, checkpoint_every=2)
        runs = []
        for name in ("a", "b"):
            run = tmp_path / name
            TR.train_codistill(cfg, tcfg, noisy[:6], clean[:6], bridge, vocab, run_dir=run)
            runs.append(run)
        for rel in ("metrics.csv", "manifest.json", "samples.jsonl"):
            assert (runs[0] / rel).read_bytes() == (runs[1] / rel).read_bytes()
        ckpts = sorted(p.name for p in (runs[0] / "checkpoints").iterdir())
        assert ckpts == ["student_0.ckpt", "student_2.ckpt", "student_3.ckpt",
                        "teacher_0.ckpt", "teacher_2.ckpt", "teacher_3.ckpt"]
        for name in ckpts:
            assert (runs[0] / "checkpoints" / name).read_bytes() == \
                (runs[1] / "checkpoints" / name).read_bytes()

    def test_corrupted_samples_get_lower_w(self, train_setup, vocab, bridge):
        """Training-time w separates mismatched from matched noisy samples."""
        cfg, noisy, clean = train_setup
        tcfg = TR.TrainConfig(seed=9, batch_size=8, steps=30, pretrain_steps=200,
                              max_decode_len=20, checkpoint_every=0, lr=1e-3)
        res = TR.train_codistill(cfg, tcfg, noisy, clean, bridge, vocab)
        # recover per-record noisy flags from the generating corpus
        noise = D.NoiseConfig(p_mismatch=0.5, p_delete=0.0, p_shuffle=0.0,
                              p_insert=0.0, sigma_feature=0.0)
        records = D.generate_corpus(60, noise, seed=11)
        flag_by_id = {r.id: r.noisy for r in records}
        w_noisy = [row["w"] for row in res.sample_reports
                   if row["stream"] == "denoise" and flag_by_id[row["sample_id"]]]
        w_clean = [row["w"] for row in res.sample_reports
                   if row["stream"] == "denoise" and not flag_by_id[row["sample_id"]]]
        assert np.mean(w_noisy) < np.mean(w_clean)

    def test_empty_dataset_errors(self, train_setup, vocab, bridge):
        cfg, noisy, clean = train_setup
        with pytest.raises(ValueError, match="non-empty"):
            TR.train_codistill(cfg, TR.TrainConfig(), [], clean, bridge, vocab)

    def test_per_epoch_alternation_runs(self, train_setup, vocab, bridge):
        cfg, noisy, clean = train_setup
        tcfg = TR.TrainConfig(seed=10, batch_size=4, steps=6, pretrain_steps=0,
                              alternation="per_epoch", max_decode_len=8,
                              checkpoint_every=0)
        res = TR.train_codistill(cfg, tcfg, noisy[:8], clean[:8], bridge, vocab)
        streams = [row["stream"] for row in res.metrics]
        assert len(streams) == 6
        assert set(streams) == {"denoise", "diversity"}

    def test_divergence_is_reported_with_step(self, train_setup):
        """A non-finite loss aborts with the step number in the message."""
        cfg, noisy, _ = train_setup
        params = M.init_params(cfg, seed=1)
        params.tensors["out_b"][0] = np.nan
        with pytest.raises(RuntimeError, match="diverged at step 1"):
            TR.pretrain(params, noisy, TR.TrainConfig(seed=1, batch_size=2), steps=5)


class TestConfigValidation:
    def test_batch_size(self):
        with pytest.raises(ValueError, match="batch_size"):
            TR.TrainConfig(batch_size=0)

    def test_negative_lr(self):
        with pytest.raises(ValueError, match="lr"):
            TR.TrainConfig(lr=-1e-4)

    def test_alternation_values(self):
        with pytest.raises(ValueError, match="alternation"):
            TR.TrainConfig(alternation="sometimes")
