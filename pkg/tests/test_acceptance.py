"""Acceptance suite: one test per criterion, each printing a pass/fail line.

Criteria 4 and 5 are desk-scale directional experiments (minutes of CPU);
the measured reference values are recorded in RESULTS.md.  Run just the fast
criteria with `pytest -m "not slow" tests/test_acceptance.py`.
"""

import json
import math
import time
from pathlib import Path

import numpy as np
import pytest

from codistill import autodiff as ad
from codistill import datagen as D
from codistill import evaluation as E
from codistill import losses as L
from codistill import model as M
from codistill import tokenizer as T
from codistill import trainer as TR
from codistill.bridge import HashedBridge
from codistill.cli import main as cli_main
from codistill.tokenizer import BOS_ID, EOS_ID

from conftest import rigged_params


def _verdict(num: int, name: str, ok: bool, detail: str) -> None:
    print(f"[criterion {num}] {name}: {'PASS' if ok else 'FAIL'} ({detail})")
    assert ok, f"criterion {num} {name}: {detail}"


# ------------------------------------------------------------ criterion 1

class TestCriterion1GradientCorrectness:
    def test_stream_loss_gradients_match_finite_differences(self):
        """Analytic gradients of both stream losses vs central differences.

        Tiny config (2 layers, embed 8, heads 2, vocab <= 20), h = 1e-4,
        64-bit floats.  Per tensor: max |analytic - fd| over the tensor,
        relative to the larger of the two tensor infinity-norms (floored at
        1e-6 so structurally-zero gradients such as attention key biases do
        not amplify finite-difference roundoff).
        """
        t0 = time.time()
        corpus = ["ab ba cab", "ba ab", "cab ab ba", "ab cab"]
        vocab = T.train_vocab([corpus], target_size=20)
        assert len(vocab) <= 20
        cfg = M.ModelConfig(vocab_size=len(vocab), feature_dim=5, layers=2,
                            embed_dim=8, heads=2, max_positions=16)
        bridge = HashedBridge(vocab, dim=32)
        rng = np.random.default_rng(42)
        feats = rng.normal(size=(2, 5))
        student = M.init_params(cfg, seed=1)
        teacher = M.init_params(cfg, seed=2)

        worst = 0.0
        h = 1e-4
        for stream, trainable, frozen, origin in (
            ("denoise", student, teacher, "noisy"),
            ("diversity", teacher, student, "clean"),
        ):
            sample = L.make_sample(vocab, feats, "ab ba cab", origin)
            partner_ids = M.greedy_decode(frozen, feats, max_len=6)

            def loss_fn(p):
                node, _ = L.batch_loss_node(p, frozen, [sample], bridge, vocab, 6,
                                            stream, [partner_ids])
                return node

            _, grads = M.loss_grad(trainable, loss_fn)

            def loss_value():
                with ad.no_grad():
                    node, _ = L.batch_loss_node(trainable.tensors_view(), frozen,
                                                [sample], bridge, vocab, 6,
                                                stream, [partner_ids])
                return float(node.data)

            for name, arr in trainable.tensors.items():
                flat = arr.reshape(-1)
                fd = np.zeros(flat.size)
                for i in range(flat.size):
                    orig = flat[i]
                    flat[i] = orig + h
                    lp = loss_value()
                    flat[i] = orig - h
                    lm = loss_value()
                    flat[i] = orig
                    fd[i] = (lp - lm) / (2.0 * h)
                a = grads[name].reshape(-1)
                denom = max(np.abs(a).max(), np.abs(fd).max(), 1e-6)
                rel = np.abs(a - fd).max() / denom
                worst = max(worst, rel)
                assert rel < 1e-4, f"{stream}/{name}: rel err {rel:.2e}"
        elapsed = time.time() - t0
        _verdict(1, "gradient correctness", worst < 1e-4 and elapsed < 120,
                 f"max rel err {worst:.2e} < 1e-4, {elapsed:.0f}s < 120s")


# ------------------------------------------------------------ criterion 2

class TestCriterion2LossIdentities:
    def test_loss_identities(self):
        rng = np.random.default_rng(7)

        def random_softmax(rows, v):
            x = rng.uniform(1e-6, 1.0, size=(rows, v))
            return x / x.sum(axis=1, keepdims=True)

        p = random_softmax(5, 12)
        kl_self = L.kl_seq(p, p)
        ok_self = abs(kl_self) <= 1e-9

        min_kl = 0.0
        for _ in range(1000):
            a = random_softmax(3, 10)
            b = random_softmax(3, 10)
            min_kl = min(min_kl, L.kl_seq(a, b))
        ok_nonneg = min_kl >= -1e-12

        v = 16
        uniform = np.full((4, v), 1.0 / v)
        ce = L.cross_entropy_seq(uniform, [1, 5, 9, 15])
        ok_ce = abs(ce - math.log(v)) <= 1e-9

        corpus = ["ab ba", "ba ab ab"]
        vocab = T.train_vocab([corpus], 24)
        cfg = M.ModelConfig(vocab_size=len(vocab), feature_dim=4, layers=1,
                            embed_dim=8, heads=2, max_positions=16)
        student = M.init_params(cfg, seed=3)
        teacher = M.init_params(cfg, seed=4)
        feats = np.random.default_rng(0).normal(size=(2, 4))
        noisy = L.make_sample(vocab, feats, "ab ba", "noisy")
        clean = L.make_sample(vocab, feats, "ab ba", "clean")

        from test_losses import _FixedWBridge

        den1 = L.denoising_loss(student, teacher, noisy, _FixedWBridge(1.0, "ab ba"),
                                vocab, 6)
        den0 = L.denoising_loss(student, teacher, noisy, _FixedWBridge(0.0, "ab ba"),
                                vocab, 6)
        div1 = L.diversity_loss(teacher, student, clean, _FixedWBridge(1.0, "ab ba"),
                                vocab, 6)
        div0 = L.diversity_loss(teacher, student, clean, _FixedWBridge(0.0, "ab ba"),
                                vocab, 6)
        ok_endpoints = (den1.total == den1.ce_term and den0.total == den0.kl_term
                        and div0.total == div0.ce_term and div1.total == div1.kl_term)

        ok = ok_self and ok_nonneg and ok_ce and ok_endpoints
        _verdict(2, "loss identities", ok,
                 f"kl(p,p)={kl_self:.1e}, min kl={min_kl:.1e}, "
                 f"ce-lnV={abs(ce - math.log(v)):.1e}, endpoints exact={ok_endpoints}")


# ------------------------------------------------------------ criterion 3

class TestCriterion3FreezeContract:
    def test_frozen_partner_bit_identical_over_ten_steps(self, vocab, bridge,
                                                         small_corpora):
        noisy_recs, clean_recs = small_corpora
        cfg = M.ModelConfig(vocab_size=len(vocab), feature_dim=D.FEATURE_DIM,
                            layers=1, embed_dim=16, heads=2, max_positions=32)
        noisy = TR.samples_from_records(noisy_recs, vocab, "noisy")
        clean = TR.samples_from_records(clean_recs, vocab, "clean")
        tcfg = TR.TrainConfig(seed=21, batch_size=4, max_decode_len=12)
        state = TR.init_state(cfg, tcfg)
        ok = True
        for step in range(10):
            lo = (step * 4) % len(noisy)
            teacher_bytes = {k: v.tobytes() for k, v in state.teacher.tensors.items()}
            TR.stream_substep(state, noisy[lo : lo + 4], bridge, vocab, tcfg, "denoise")
            ok &= all(state.teacher.tensors[k].tobytes() == b
                      for k, b in teacher_bytes.items())
            student_bytes = {k: v.tobytes() for k, v in state.student.tensors.items()}
            TR.stream_substep(state, clean[lo : lo + 4], bridge, vocab, tcfg, "diversity")
            ok &= all(state.student.tensors[k].tobytes() == b
                      for k, b in student_bytes.items())
        _verdict(3, "freeze contract", ok,
                 "teacher/student tensors bit-identical across 10 steps of the "
                 "opposite stream")


# ------------------------------------------------- criteria 4 and 5 setup

ACCEPT_NOISE = D.NoiseConfig(p_mismatch=0.5, p_delete=0.0, p_shuffle=0.0,
                             p_insert=0.0, sigma_feature=0.0)


@pytest.fixture(scope="module")
def accept_corpora():
    noisy = D.generate_corpus(2000, ACCEPT_NOISE, seed=401)
    clean = D.generate_corpus(2000, D.CLEAN_NOISE, seed=402)
    test = D.generate_corpus(400, D.CLEAN_NOISE, seed=403)
    vocab = T.train_vocab([[r.caption for r in noisy], [r.caption for r in clean]], 512)
    cfg = M.ModelConfig(vocab_size=len(vocab), feature_dim=D.FEATURE_DIM)
    return noisy, clean, test, vocab, cfg


@pytest.mark.slow
class TestCriterion4CoherenceDiscrimination:
    def test_warm_teacher_w_separates_corrupted_captions(self, accept_corpora):
        """AUC of denoising-stream w values over the mismatch-noised corpus."""
        t0 = time.time()
        noisy, clean, _, vocab, cfg = accept_corpora
        bridge = HashedBridge(vocab)
        teacher = M.init_params(cfg, seed=2)
        teacher = TR.pretrain(teacher, TR.samples_from_records(clean, vocab, "clean"),
                              TR.TrainConfig(batch_size=8, lr=3e-4, seed=7,
                                             warmup_steps=100),
                              steps=2000)
        report = E.evaluate_model(teacher, noisy, bridge, vocab, max_len=24)
        elapsed = time.time() - t0
        ok = report.auc is not None and report.auc >= 0.90 and elapsed < 900
        _verdict(4, "coherence discrimination", ok,
                 f"AUC={report.auc:.4f} >= 0.90, {elapsed:.0f}s < 900s")


@pytest.mark.slow
class TestCriterion5DenoisingBenefit:
    def test_codistilled_student_beats_noisy_baseline(self, accept_corpora):
        """Co-distilled student vs noisy-only CE baseline at identical budget."""
        t0 = time.time()
        noisy, clean, test, vocab, cfg = accept_corpora
        bridge = HashedBridge(vocab)
        ns = TR.samples_from_records(noisy, vocab, "noisy")
        cs = TR.samples_from_records(clean, vocab, "clean")
        tcfg = TR.TrainConfig(batch_size=8, steps=3000, pretrain_steps=2000,
                              lr=3e-4, seed=7, warmup_steps=100,
                              checkpoint_every=0, max_decode_len=24)
        result = TR.train_codistill(cfg, tcfg, ns, cs, bridge, vocab)

        baseline = M.init_params(cfg, TR._child_seed(tcfg.seed, 1))
        baseline = TR.pretrain(
            baseline, ns,
            TR.TrainConfig(batch_size=8, lr=3e-4, seed=TR._child_seed(tcfg.seed, 21),
                           warmup_steps=100),
            steps=tcfg.pretrain_steps + tcfg.steps,
        )

        student_bleu = E.evaluate_model(result.state.student, test, bridge, vocab,
                                        max_len=24).bleu4
        baseline_bleu = E.evaluate_model(baseline, test, bridge, vocab,
                                         max_len=24).bleu4
        margin = student_bleu - baseline_bleu
        elapsed = time.time() - t0
        ok = margin >= 0.02 and elapsed < 1800
        _verdict(5, "denoising benefit", ok,
                 f"student BLEU {student_bleu:.4f} vs baseline {baseline_bleu:.4f}, "
                 f"margin {margin:+.4f} >= +0.02, {elapsed:.0f}s < 1800s")


# ------------------------------------------------------------ criterion 6

@pytest.mark.slow
class TestCriterion6Determinism:
    def test_two_full_train_runs_byte_identical(self, tmp_path, capsys):
        out = tmp_path / "data"
        assert cli_main(["datagen", "--n", "40", "--n-test", "8", "--seed", "5",
                         "--out", str(out)]) == 0
        runs = []
        for name in ("r1", "r2"):
            run = tmp_path / name
            code = cli_main(["train", "--noisy", str(out / "noisy.jsonl"),
                             "--clean", str(out / "clean.jsonl"),
                             "--out", str(run), "--steps", "5",
                             "--pretrain-steps", "5", "--batch-size", "4",
                             "--seed", "11", "--embed-dim", "32", "--heads", "4",
                             "--max-decode-len", "12", "--checkpoint-every", "2"])
            assert code == 0
            runs.append(run)
        capsys.readouterr()
        identical = (runs[0] / "metrics.csv").read_bytes() == \
            (runs[1] / "metrics.csv").read_bytes()
        ckpt_names = sorted(p.name for p in (runs[0] / "checkpoints").iterdir())
        for name in ckpt_names:
            identical &= (runs[0] / "checkpoints" / name).read_bytes() == \
                (runs[1] / "checkpoints" / name).read_bytes()
        _verdict(6, "determinism", identical,
                 f"metrics.csv and {len(ckpt_names)} checkpoints byte-identical")


# ------------------------------------------------------------ criterion 7

class TestCriterion7RoundTrips:
    def test_tokenizer_corpus_and_checkpoint_round_trips(self, tmp_path):
        records = D.generate_corpus(1000, D.CLEAN_NOISE, seed=77)
        captions = [r.caption for r in records]
        vocab = T.train_vocab([captions], 512)
        tok_ok = all(T.decode(vocab, T.encode(vocab, c)) == T.normalize(c)
                     for c in captions)

        jitter = D.NoiseConfig(0.2, 0.1, 0.1, 0.1, 0.05)
        recs = D.generate_corpus(200, jitter, seed=78)
        path = tmp_path / "corpus.jsonl"
        D.write_corpus(recs, path)
        loaded = D.read_corpus(path)
        corpus_ok = len(loaded) == len(recs) and all(
            np.abs(a.features - b.features).max() <= 1e-7
            and a.caption == b.caption and a.noisy == b.noisy
            for a, b in zip(recs, loaded)
        )

        cfg = M.ModelConfig(vocab_size=len(vocab), feature_dim=D.FEATURE_DIM,
                            layers=1, embed_dim=16, heads=2)
        params = M.init_params(cfg, seed=5)
        ck = tmp_path / "m.ckpt"
        M.save_checkpoint(params, ck)
        reloaded = M.params_from_checkpoint(cfg, ck)
        M.save_checkpoint(reloaded, tmp_path / "m2.ckpt")
        ckpt_ok = ck.read_bytes() == (tmp_path / "m2.ckpt").read_bytes()
        blob = bytearray(ck.read_bytes())
        blob[10] ^= 0x01
        (tmp_path / "bad.ckpt").write_bytes(bytes(blob))
        try:
            M.load_checkpoint(tmp_path / "bad.ckpt")
            checksum_ok = False
        except ValueError as err:
            checksum_ok = "checksum mismatch" in str(err)

        ok = tok_ok and corpus_ok and ckpt_ok and checksum_ok
        _verdict(7, "round trips", ok,
                 f"tokenizer 1000 captions={tok_ok}, corpus io={corpus_ok}, "
                 f"checkpoint bitwise={ckpt_ok}, checksum guard={checksum_ok}")


# ------------------------------------------------------------ criterion 8

class TestCriterion8GreedyDecodeOracle:
    def test_rigged_projection_and_tie_break(self):
        cfg = M.ModelConfig(vocab_size=20, feature_dim=5, layers=2, embed_dim=8,
                            heads=2, max_positions=16)
        rig = rigged_params(cfg, [5, 7, EOS_ID])
        feats = np.random.default_rng(3).normal(size=(2, 5))
        forced = M.greedy_decode(rig, feats, 10)

        tie = M.init_params(cfg, seed=0)
        for name, arr in tie.tensors.items():
            tie.tensors[name] = (np.ones_like(arr) if name.endswith(".gain")
                                 else np.zeros_like(arr))
        tie.tensors["pos_emb"][0, 0] = 1.0
        tie.tensors["out_w"][0, 9] = 10.0
        tie.tensors["out_w"][0, 5] = 10.0
        tie_out = M.greedy_decode(tie, np.zeros((1, 5)), 1)

        ok = forced == [5, 7] and tie_out == [5]
        _verdict(8, "greedy decode oracle", ok,
                 f"forced sequence -> {forced}, tie resolves to {tie_out[0]}")


# ------------------------------------------------------------ criterion 9

class TestCriterion9BleuOracle:
    def test_three_bleu_hand_values(self):
        """Identity, zero-overlap add-one smoothing, half-length brevity penalty.

        Zero overlap, candidate and reference length 4: candidate n-gram
        totals are 4, 3, 2, 1, all with zero matches, so the smoothed
        precisions are 1/5, 1/4, 1/3, 1/2 and the score is their geometric
        mean (1/120)^(1/4) with BP = 1.
        """
        identity = E.bleu4([["a", "b", "c", "d"]], [[["a", "b", "c", "d"]]])
        ok_identity = abs(identity - 1.0) <= 1e-9

        zero = E.bleu4([["a", "b", "c", "d"]], [[["w", "x", "y", "z"]]])
        expected_zero = (1.0 / 120.0) ** 0.25
        ok_zero = abs(zero - expected_zero) <= 1e-9

        ref = ["a", "b", "c", "d", "e", "f", "g", "h"]
        half = E.bleu4([ref[:4]], [[ref]])
        ok_half = abs(half - math.exp(-1.0)) <= 1e-9

        ok = ok_identity and ok_zero and ok_half
        _verdict(9, "BLEU oracle", ok,
                 f"identity={identity:.9f}, zero-overlap={zero:.9f} "
                 f"(expected {expected_zero:.9f}), half-length={half:.9f} "
                 f"(expected {math.exp(-1.0):.9f})")
