"""Shared fixtures: tiny vocabularies, corpora, and rigged models for oracles."""

import numpy as np
import pytest

from codistill import datagen as D
from codistill import model as M
from codistill import tokenizer as T
from codistill.bridge import HashedBridge
from codistill.tokenizer import EOS_ID


@pytest.fixture(scope="session")
def small_corpora():
    """60 noisy (mismatch-only) + 60 clean records sharing the template grammar."""
    noise = D.NoiseConfig(p_mismatch=0.5, p_delete=0.0, p_shuffle=0.0,
                          p_insert=0.0, sigma_feature=0.0)
    noisy = D.generate_corpus(60, noise, seed=11)
    clean = D.generate_corpus(60, D.CLEAN_NOISE, seed=12)
    return noisy, clean


@pytest.fixture(scope="session")
def vocab(small_corpora):
    noisy, clean = small_corpora
    return T.train_vocab([[r.caption for r in noisy], [r.caption for r in clean]], 512)


@pytest.fixture(scope="session")
def bridge(vocab):
    return HashedBridge(vocab, dim=256)


@pytest.fixture(scope="session")
def tiny_config(vocab):
    return M.ModelConfig(vocab_size=len(vocab), feature_dim=D.FEATURE_DIM,
                         layers=2, embed_dim=16, heads=2, max_positions=32)


def rigged_params(config: M.ModelConfig, forced: list[int]) -> M.ModelParams:
    """Params whose decoder emits `forced` position by position, whatever the input.

    All block weights are zeroed so the residual stream carries only the
    (one-hot) position embedding; the output projection then votes the forced
    token at each position.  Requires len(forced) < embed_dim.
    """
    if len(forced) >= config.embed_dim:
        raise ValueError("forced sequence longer than embed_dim allows")
    params = M.init_params(config, seed=0)
    for name, arr in params.tensors.items():
        if name.endswith(".gain"):
            params.tensors[name] = np.ones_like(arr)
        else:
            params.tensors[name] = np.zeros_like(arr)
    for t in range(len(forced)):
        params.tensors["pos_emb"][t, t] = 1.0
        params.tensors["out_w"][t, forced[t]] = 10.0
    return params


@pytest.fixture
def echo_eos_config():
    return M.ModelConfig(vocab_size=24, feature_dim=4, layers=1, embed_dim=16,
                         heads=2, max_positions=16)


def forced_decode_params(config: M.ModelConfig, content: list[int]) -> M.ModelParams:
    """Rig that emits `content` then EOS."""
    return rigged_params(config, content + [EOS_ID])
