"""Sequence losses and the two coherence-weighted training streams.

The denoising stream trains the student on noisy data: cross-entropy on the
(noisy) ground truth blended with a KL pull toward the frozen teacher,
weighted by the semantic coherence w between the ground truth and the
teacher's greedy caption.  The diversity stream is the mirror image: the
teacher trains on clean data, trusting its ground truth when w is small and
distilling the student when w is high.

Loss terms are combined after computation (total = a*ce + b*kl with plain
float weights), so the endpoint identities at w in {0, 1} hold exactly.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from . import model as M
from . import tokenizer as tok
from .autodiff import Tensor
from .bridge import coherence_weight

PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class StreamSample:
    """One training example: region features plus its (possibly noisy) caption."""

    features: np.ndarray
    gt_caption: str
    gt_tokens: tuple[int, ...]
    origin: str  # "noisy" or "clean"
    id: int = -1


@dataclass(frozen=True)
class StreamLossReport:
    stream: str  # "denoise" or "diversity"
    total: float
    ce_term: float
    kl_term: float
    w: float
    partner_caption: str


def make_sample(vocab: tok.Vocab, features, caption: str, origin: str,
                sample_id: int = -1) -> StreamSample:
    return StreamSample(
        features=np.asarray(features, dtype=np.float64),
        gt_caption=caption,
        gt_tokens=tuple(tok.encode(vocab, caption)),
        origin=origin,
        id=sample_id,
    )


def cross_entropy_seq(softmaxes, targets: Sequence[int]):
    """Mean over non-PAD positions of -log p[t][targets[t]].

    Returns a Tensor when `softmaxes` is a Tensor (tape mode), else a float.
    """
    tape = isinstance(softmaxes, Tensor)
    sm = softmaxes if tape else Tensor(softmaxes)
    targets = np.asarray(targets, dtype=np.intp)
    if sm.shape[0] != targets.shape[0]:
        raise ValueError(
            f"length mismatch: {sm.shape[0]} softmax rows vs {targets.shape[0]} targets"
        )
    keep = targets != tok.PAD_ID
    n_keep = int(keep.sum())
    if n_keep == 0:
        raise ValueError("all target positions are PAD")
    picked = ad.take_rows(sm, targets)
    logp = ad.log_clamped(picked, PROB_FLOOR)
    masked = logp * keep.astype(np.float64) if n_keep != targets.shape[0] else logp
    out = ad.tsum(masked) * (-1.0 / n_keep)
    return out if tape else float(out.data)


def kl_seq(p, q):
    """Mean over positions of KL(p[t] || q[t]); gradients flow only into `q`.

    `p` is the frozen reference (detached if a Tensor); `q` the trainable one.
    """
    p_data = p.data if isinstance(p, Tensor) else np.asarray(p, dtype=np.float64)
    tape = isinstance(q, Tensor)
    qt = q if tape else Tensor(q)
    if p_data.shape != qt.shape:
        raise ValueError(f"length mismatch: p {p_data.shape} vs q {qt.shape}")
    log_p = np.log(np.maximum(p_data, PROB_FLOOR))
    log_q = ad.log_clamped(qt, PROB_FLOOR)
    per_pos = ad.tsum((log_q * -1.0 + log_p) * p_data, axis=-1)
    out = ad.tmean(per_pos)
    return out if tape else float(out.data)


def _stream_loss_node(trainable: Mapping[str, Tensor], frozen: M.ModelParams,
                      sample: StreamSample, bridge, vocab: tok.Vocab, max_len: int,
                      stream: str, partner_ids: Sequence[int] | None = None
                      ) -> tuple[Tensor, StreamLossReport]:
    """Build the tape node for one sample of either stream.

    `trainable` holds the updated model's tensors (student for "denoise",
    teacher for "diversity"); `frozen` is the partner.  The partner's greedy
    decode may be passed in (`partner_ids`) when precomputed in a batch.
    """
    config = frozen.config
    feats = M.validate_features(config, sample.features)
    if partner_ids is None:
        partner_ids = M.greedy_decode(frozen, feats, max_len)
    partner_ids = list(partner_ids)
    partner_caption = tok.decode(vocab, partner_ids)
    w = coherence_weight(bridge.embed(sample.gt_caption), bridge.embed(partner_caption))

    gt = list(sample.gt_tokens)
    ce_rows = M.forward_graph(trainable, config, feats, np.array([tok.BOS_ID] + gt, dtype=np.intp))
    ce = cross_entropy_seq(ce_rows, gt + [tok.EOS_ID])

    # both models teacher-forced on the frozen model's own greedy sequence;
    # an empty decode still yields the single EOS-prediction position
    y_prefix = np.array([tok.BOS_ID] + partner_ids, dtype=np.intp)
    with ad.no_grad():
        frozen_rows = M.forward_graph(frozen.tensors_view(), config, feats, y_prefix)
    trainable_rows = M.forward_graph(trainable, config, feats, y_prefix)
    kl = kl_seq(frozen_rows.data, trainable_rows)

    if stream == "denoise":
        ce_w, kl_w = w, 1.0 - w
    elif stream == "diversity":
        ce_w, kl_w = 1.0 - w, w
    else:
        raise ValueError(f"unknown stream {stream!r}")
    total = ce * ce_w + kl * kl_w
    report = StreamLossReport(
        stream=stream,
        total=float(total.data),
        ce_term=float(ce.data),
        kl_term=float(kl.data),
        w=w,
        partner_caption=partner_caption,
    )
    return total, report


def denoising_loss(student: M.ModelParams, teacher: M.ModelParams, sample: StreamSample,
                   bridge, vocab: tok.Vocab, max_len: int,
                   partner_ids: Sequence[int] | None = None) -> StreamLossReport:
    """total = w*CE(student, noisy gt) + (1-w)*KL(teacher || student) on the teacher's decode."""
    if sample.origin != "noisy":
        raise ValueError("denoising stream expects a noisy-origin sample")
    with ad.no_grad():
        _, report = _stream_loss_node(student.tensors_view(), teacher, sample, bridge,
                                      vocab, max_len, "denoise", partner_ids)
    return report


def diversity_loss(teacher: M.ModelParams, student: M.ModelParams, sample: StreamSample,
                   bridge, vocab: tok.Vocab, max_len: int,
                   partner_ids: Sequence[int] | None = None) -> StreamLossReport:
    """total = (1-w)*CE(teacher, clean gt) + w*KL(student || teacher) on the student's decode."""
    if sample.origin != "clean":
        raise ValueError("diversity stream expects a clean-origin sample")
    with ad.no_grad():
        _, report = _stream_loss_node(teacher.tensors_view(), student, sample, bridge,
                                      vocab, max_len, "diversity", partner_ids)
    return report


def batch_loss_node(trainable: Mapping[str, Tensor], frozen: M.ModelParams,
                    batch: Sequence[StreamSample], bridge, vocab: tok.Vocab,
                    max_len: int, stream: str,
                    partner_decodes: Sequence[Sequence[int]] | None = None
                    ) -> tuple[Tensor, list[StreamLossReport]]:
    """Mean stream loss over a batch; summation order is fixed by sample index."""
    if not batch:
        raise ValueError("empty batch")
    if partner_decodes is None:
        partner_decodes = [None] * len(batch)
    nodes = []
    reports = []
    for sample, ids in zip(batch, partner_decodes):
        node, report = _stream_loss_node(trainable, frozen, sample, bridge, vocab,
                                         max_len, stream, ids)
        nodes.append(node)
        reports.append(report)
    total = nodes[0]
    for node in nodes[1:]:
        total = total + node
    return total * (1.0 / len(nodes)), reports
