import sys, time, json
import numpy as np
from codistill import datagen as D, tokenizer as T, model as M, trainer as TR
from codistill.evaluation import evaluate_model
from codistill.bridge import HashedBridge

seed = int(sys.argv[1])
t0 = time.time()
noise = D.NoiseConfig(0.5, 0, 0, 0, 0.0)
noisy = D.generate_corpus(2000, noise, seed=401)
clean = D.generate_corpus(2000, D.CLEAN_NOISE, seed=402)
test  = D.generate_corpus(400, D.CLEAN_NOISE, seed=403)
vocab = T.train_vocab([[r.caption for r in noisy], [r.caption for r in clean]], 512)
cfg = M.ModelConfig(vocab_size=len(vocab), feature_dim=D.FEATURE_DIM)
ns = TR.samples_from_records(noisy, vocab, "noisy")
cs = TR.samples_from_records(clean, vocab, "clean")
bridge = HashedBridge(vocab)
tcfg = TR.TrainConfig(batch_size=8, steps=3000, pretrain_steps=2000, lr=3e-4, seed=seed,
                      warmup_steps=100, checkpoint_every=0, max_decode_len=24)
res = TR.train_codistill(cfg, tcfg, ns, cs, bridge, vocab, run_dir=None)
baseline = M.init_params(cfg, TR._child_seed(tcfg.seed, 1))
baseline = TR.pretrain(baseline, ns, TR.TrainConfig(batch_size=8, lr=3e-4, seed=TR._child_seed(tcfg.seed, 21), warmup_steps=100), steps=5000)
rs = evaluate_model(res.state.student, test, bridge, vocab, max_len=24)
rt = evaluate_model(res.state.teacher, test, bridge, vocab, max_len=24)
rb = evaluate_model(baseline, test, bridge, vocab, max_len=24)
out = {"seed": seed, "student": rs.bleu4, "teacher": rt.bleu4, "baseline": rb.bleu4,
       "margin": rs.bleu4 - rb.bleu4, "elapsed_s": time.time() - t0}
print(json.dumps(out))
with open(f".calib/crit5_seed{seed}.json", "w") as fh:
    json.dump(out, fh, indent=2)
