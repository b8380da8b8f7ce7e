"""Cooperative distillation for image captioning with noisy labels, desk scale.

Two small transformer captioners train each other: a student on a noisy
corpus and a teacher on a clean one, alternating denoising and diversity
streams whose cross-entropy/KL blend is gated by a semantic coherence weight.
"""

from .bridge import (CaptionEmbedding, HashedBridge, RemoteBridge, BridgeError,
                     coherence_weight, make_bridge, remote_embed_batch)
from .datagen import (CorpusRecord, NoiseConfig, Scene, SceneObject,
                      generate_corpus, read_corpus, template_caption, write_corpus)
from .evaluation import EvalReport, bleu4, coherence_auc, evaluate_model
from .losses import (StreamLossReport, StreamSample, cross_entropy_seq,
                     denoising_loss, diversity_loss, kl_seq, make_sample)
from .model import (ModelConfig, ModelParams, forward, greedy_decode,
                    init_params, load_checkpoint, loss_grad, save_checkpoint)
from .tokenizer import (Vocab, decode, encode, load_vocab, save_vocab, train_vocab)
from .trainer import (Adam, TrainConfig, TrainState, codistill_step, pretrain,
                      train_codistill)

__version__ = "0.1.0"

__all__ = [
    "Adam",
    "BridgeError",
    "CaptionEmbedding",
    "CorpusRecord",
    "EvalReport",
    "HashedBridge",
    "ModelConfig",
    "ModelParams",
    "NoiseConfig",
    "RemoteBridge",
    "Scene",
    "SceneObject",
    "StreamLossReport",
    "StreamSample",
    "TrainConfig",
    "TrainState",
    "Vocab",
    "bleu4",
    "codistill_step",
    "coherence_auc",
    "coherence_weight",
    "cross_entropy_seq",
    "decode",
    "denoising_loss",
    "diversity_loss",
    "encode",
    "evaluate_model",
    "forward",
    "generate_corpus",
    "greedy_decode",
    "init_params",
    "kl_seq",
    "load_checkpoint",
    "load_vocab",
    "loss_grad",
    "make_bridge",
    "make_sample",
    "pretrain",
    "read_corpus",
    "remote_embed_batch",
    "save_checkpoint",
    "save_vocab",
    "template_caption",
    "train_codistill",
    "train_vocab",
    "write_corpus",
]
