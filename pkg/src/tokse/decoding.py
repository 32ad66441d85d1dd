"""Inference-time token generation for the transducer and NAR models.

All decoders emit exactly T frames (identity alignment, no stop symbol).
Hypothesis scores are sums over steps and codebooks of per-token
log-probabilities; there is no length normalization since every hypothesis
has the same length. Ties break toward the lexicographically smallest token
tuple so decodes are deterministic.

Beam expansion is joint across codebooks: each live hypothesis expands over
the Cartesian product of per-codebook top-m candidates, then the global top
``beam_size`` survive. With K = 1 and m = beam size this reduces to textbook
beam search.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
import torch

from tokse.core import CodecSpec, Hypothesis, TokenSequence, ValidationError
from tokse.model import NARModel, SETModel, _as_long_tensor, shift_with_start


@dataclass(frozen=True)
class BeamConfig:
    beam_size: int = 5
    per_codebook_topk: int | None = None  # None: same as beam_size

    def __post_init__(self) -> None:
        if self.beam_size < 1:
            raise ValidationError(f"beam_size must be >= 1, got {self.beam_size}")
        if self.per_codebook_topk is not None and self.per_codebook_topk < 1:
            raise ValidationError("per_codebook_topk must be >= 1")

    @property
    def topk(self) -> int:
        return self.beam_size if self.per_codebook_topk is None else self.per_codebook_topk


def _check_model_seq(model, seq: TokenSequence) -> None:
    if seq.spec.num_codebooks != model.codec.num_codebooks or \
            seq.spec.codebook_size != model.codec.codebook_size:
        raise ValidationError("token sequence spec does not match model codec")


def decode_nar(model: NARModel, noisy: TokenSequence) -> TokenSequence:
    """Single-pass per-position, per-codebook argmax."""
    _check_model_seq(model, noisy)
    with torch.no_grad():
        logits = model(_as_long_tensor(noisy))
    return TokenSequence(logits.argmax(dim=-1).cpu().numpy(), model.codec)


def decode_teacher_forced(model: SETModel, noisy: TokenSequence, clean: TokenSequence
                          ) -> tuple[TokenSequence, np.ndarray]:
    """Argmax decode with the ground-truth history on the predictor input.

    Returns the decoded grid and the (K, T) log-probabilities of the chosen
    ids (log-softmax of the forward logits at the argmax positions).
    """
    _check_model_seq(model, noisy)
    if clean.num_frames != noisy.num_frames:
        raise ValidationError(
            f"clean length {clean.num_frames} != noisy length {noisy.num_frames}"
        )
    with torch.no_grad():
        logits = model(_as_long_tensor(noisy), _as_long_tensor(shift_with_start(clean)))
        logp = torch.log_softmax(logits, dim=-1)
        ids = logits.argmax(dim=-1)
        chosen = torch.gather(logp, 2, ids.unsqueeze(-1)).squeeze(-1)
    return TokenSequence(ids.cpu().numpy(), model.codec), chosen.cpu().numpy()


def decode_greedy(model: SETModel, noisy: TokenSequence) -> TokenSequence:
    """Sequential self-feeding argmax; identical to beam search with beam 1."""
    return decode_beam(model, noisy, BeamConfig(beam_size=1, per_codebook_topk=1))


def decode_beam(model: SETModel, noisy: TokenSequence,
                config: BeamConfig | None = None,
                return_hypothesis: bool = False) -> TokenSequence | Hypothesis:
    """Multi-codebook beam search over exactly T steps.

    Per step, each hypothesis expands over the product of per-codebook top-m
    token candidates; the global ``beam_size`` best by accumulated
    log-probability survive. The encoder runs once; the predictor reruns per
    hypothesis prefix (single causal layer, cheap at lab scale).
    """
    _check_model_seq(model, noisy)
    config = config or BeamConfig()
    k = model.codec.num_codebooks
    c = model.codec.codebook_size
    start = model.codec.start_token
    t_len = noisy.num_frames
    if t_len == 0:
        empty = TokenSequence(np.zeros((k, 0), dtype=np.int64), model.codec)
        return Hypothesis(empty.tokens, 0.0) if return_hypothesis else empty

    topm = min(config.topk, c)
    with torch.no_grad():
        enc = model.encode(_as_long_tensor(noisy))
        # prefix (K, t) token array + accumulated score per hypothesis
        beams: list[tuple[np.ndarray, float]] = [(np.zeros((k, 0), dtype=np.int64), 0.0)]
        for t in range(t_len):
            logp = _step_logprobs(model, enc, [tokens for tokens, _ in beams], t)
            candidates: list[tuple[float, tuple, np.ndarray]] = []
            for (tokens, score), lp in zip(beams, logp):
                per_cb = [np.argsort(-lp[kk], kind="stable")[:topm] for kk in range(k)]
                for combo in itertools.product(*per_cb):
                    gain = float(sum(lp[kk, combo[kk]] for kk in range(k)))
                    new_tokens = np.concatenate(
                        [tokens, np.asarray(combo, dtype=np.int64)[:, None]], axis=1
                    )
                    candidates.append((score + gain, tuple(new_tokens.ravel()), new_tokens))
            candidates.sort(key=lambda item: (-item[0], item[1]))
            beams = [(tokens, score) for score, _, tokens in candidates[: config.beam_size]]
    best_tokens, best_score = beams[0]
    if return_hypothesis:
        return Hypothesis(best_tokens, min(best_score, 0.0))
    return TokenSequence(best_tokens, model.codec)


def _step_logprobs(model: SETModel, enc: torch.Tensor,
                   prefixes: list[np.ndarray], t: int) -> np.ndarray:
    """Next-step log-probabilities for a batch of equal-length prefixes.

    Returns (N, K, C): one distribution grid per prefix, conditioned on the
    shared encoder state at frame ``t`` and each prefix's own history.
    """
    k = model.codec.num_codebooks
    start = model.codec.start_token
    shifted = np.full((len(prefixes), k, t + 1), start, dtype=np.int64)
    for i, prefix in enumerate(prefixes):
        shifted[i, :, 1:] = prefix
    pred = model.predict(torch.from_numpy(shifted))  # (N, t+1, D)
    enc_t = enc[t : t + 1].unsqueeze(0).expand(len(prefixes), 1, -1)
    logits = model.join(enc_t, pred[:, t : t + 1])[:, :, 0, :]  # (N, K, C)
    return torch.log_softmax(logits, dim=-1).cpu().numpy()


def score_sequence(model: SETModel, noisy: TokenSequence,
                   output: TokenSequence) -> float:
    """Sum of per-step, per-codebook log-probabilities of ``output``.

    One teacher-forced forward on the output's own history; used both as the
    hypothesis-score recomputation oracle and by the exhaustive search.
    """
    _check_model_seq(model, noisy)
    if output.num_frames != noisy.num_frames:
        raise ValidationError("output length must equal input length")
    if output.num_frames == 0:
        return 0.0
    with torch.no_grad():
        logits = model(_as_long_tensor(noisy), _as_long_tensor(shift_with_start(output)))
        logp = torch.log_softmax(logits, dim=-1)
        ids = _as_long_tensor(output)
        return float(torch.gather(logp, 2, ids.unsqueeze(-1)).sum())


def exhaustive_argmax(model: SETModel, noisy: TokenSequence) -> tuple[TokenSequence, float]:
    """Exact joint argmax over all (C^K)^T output sequences.

    Expands the complete prefix tree level by level with no pruning: every
    sequence's score is the sum of its per-step log-probabilities, identical
    to rescoring each sequence from scratch, but with shared prefixes
    evaluated once. Only for tiny instances: the tree has (C^K)^T leaves.
    """
    _check_model_seq(model, noisy)
    k, c = model.codec.num_codebooks, model.codec.codebook_size
    t_len = noisy.num_frames
    if t_len == 0:
        return TokenSequence(np.zeros((k, 0), dtype=np.int64), model.codec), 0.0
    combos = np.asarray(list(itertools.product(range(c), repeat=k)), dtype=np.int64)  # (C^K, K)
    n_combo = combos.shape[0]

    with torch.no_grad():
        enc = model.encode(_as_long_tensor(noisy))
        prefixes = np.zeros((1, k, 0), dtype=np.int64)
        scores = np.zeros(1)
        for t in range(t_len):
            logp = _step_logprobs(model, enc, list(prefixes), t)  # (N, K, C)
            gains = logp[:, 0, combos[:, 0]]
            for kk in range(1, k):
                gains = gains + logp[:, kk, combos[:, kk]]  # (N, C^K)
            scores = (scores[:, None] + gains).reshape(-1)
            n = prefixes.shape[0]
            expanded = np.repeat(prefixes, n_combo, axis=0)  # (N*C^K, K, t)
            appended = np.tile(combos, (n, 1))[:, :, None]  # row i*C^K+j = combos[j]
            prefixes = np.concatenate([expanded, appended], axis=2)
    best_score = scores.max()
    near = np.nonzero(scores >= best_score - 1e-12)[0]
    winner = min(near, key=lambda i: tuple(prefixes[i].ravel()))
    return TokenSequence(prefixes[winner], model.codec), float(scores[winner])
