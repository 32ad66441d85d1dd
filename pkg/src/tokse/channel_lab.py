"""Synthetic clean-token source and substitution channel with exact inference.

Desk-scale stand-in for a speech corpus: clean token grids are drawn from a
first-order Markov source (joint over C^K states, or factored per codebook),
then corrupted by an independent per-position substitution channel whose
strength comes from an SNR-like knob. Forward-backward and Viterbi over the
joint hidden chain give exact per-step posteriors and MAP decodes: the Bayes
ceilings that trained token models are graded against.

The SNR-to-substitution-rate map is r = 1 / (1 + 10^(snr/10)), clamped to
[0.02, 0.98]. It is a modeling convention (monotone, r = 0.5 at 0 dB), not a
claim about acoustic noise physics.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import reduce
from typing import Sequence

import numpy as np

from tokse.core import CodecSpec, TokenSequence, ValidationError

MAX_JOINT_STATES = 4096
_RATE_CLAMP = (0.02, 0.98)
_ROW_TOL = 1e-9


def substitution_rate(noise_level_db: float) -> float:
    """Map an SNR in dB to a per-token substitution probability."""
    r = 1.0 / (1.0 + 10.0 ** (noise_level_db / 10.0))
    return float(np.clip(r, *_RATE_CLAMP))


def _check_rows(name: str, mat: np.ndarray) -> np.ndarray:
    mat = np.asarray(mat, dtype=np.float64)
    rows = mat if mat.ndim == 2 else mat[None, :]
    if np.any(rows < -_ROW_TOL):
        raise ValidationError(f"{name} has negative entries")
    err = np.abs(rows.sum(axis=-1) - 1.0).max()
    if err > _ROW_TOL:
        raise ValidationError(f"{name} rows must sum to 1 (max deviation {err:.2e})")
    mat.setflags(write=False)
    return mat


@dataclass(frozen=True)
class ChannelSpec:
    """Markov token source + substitution channel over a codec's token space.

    ``source_init`` / ``source_trans`` hold one (pi, A) pair per codebook when
    ``joint_source`` is False, or a single pair over all C^K joint states when
    True. ``confusion`` is always per codebook: row y gives the replacement
    distribution used when position (k, t) is hit by the channel.
    """

    codec: CodecSpec
    noise_level_db: float
    source_init: tuple[np.ndarray, ...]
    source_trans: tuple[np.ndarray, ...]
    confusion: tuple[np.ndarray, ...]
    seed: int = 0
    joint_source: bool = False

    def __post_init__(self) -> None:
        k, c = self.codec.num_codebooks, self.codec.codebook_size
        n_chains = 1 if self.joint_source else k
        n_states = c**k if self.joint_source else c
        if len(self.source_init) != n_chains or len(self.source_trans) != n_chains:
            raise ValidationError(
                f"expected {n_chains} source chain(s), got "
                f"{len(self.source_init)}/{len(self.source_trans)}"
            )
        init = tuple(_check_rows("source_init", p.reshape(-1)) for p in self.source_init)
        trans = tuple(_check_rows("source_trans", a) for a in self.source_trans)
        for p, a in zip(init, trans):
            if p.shape != (n_states,) or a.shape != (n_states, n_states):
                raise ValidationError(
                    f"source shapes {p.shape}/{a.shape} do not match {n_states} states"
                )
        if len(self.confusion) != k:
            raise ValidationError(f"expected {k} confusion matrices, got {len(self.confusion)}")
        conf = tuple(_check_rows("confusion", m) for m in self.confusion)
        for m in conf:
            if m.shape != (c, c):
                raise ValidationError(f"confusion shape {m.shape}, expected ({c}, {c})")
        object.__setattr__(self, "source_init", init)
        object.__setattr__(self, "source_trans", trans)
        object.__setattr__(self, "confusion", conf)

    @property
    def rate(self) -> float:
        return substitution_rate(self.noise_level_db)

    @property
    def num_joint_states(self) -> int:
        return self.codec.codebook_size**self.codec.num_codebooks

    def emission_matrices(self) -> list[np.ndarray]:
        """Per-codebook P(observed | clean) = (1-r) I + r * confusion."""
        r = self.rate
        c = self.codec.codebook_size
        return [(1.0 - r) * np.eye(c) + r * m for m in self.confusion]

    def joint_chain(self) -> tuple[np.ndarray, np.ndarray]:
        """(pi, A) over the C^K joint state space (Kronecker of factored chains)."""
        self._check_state_space()
        if self.joint_source:
            return self.source_init[0], self.source_trans[0]
        pi = reduce(np.kron, self.source_init)
        a = reduce(np.kron, self.source_trans)
        return pi, a

    def _check_state_space(self) -> None:
        if self.num_joint_states > MAX_JOINT_STATES:
            raise ValidationError(
                f"joint state space {self.num_joint_states} exceeds "
                f"{MAX_JOINT_STATES}; exact inference is for tiny instances"
            )

    def joint_emissions(self, noisy: TokenSequence) -> np.ndarray:
        """(T, S) likelihoods P(x_t | y_t = s) for every joint state s."""
        self._check_state_space()
        k, c = self.codec.num_codebooks, self.codec.codebook_size
        mats = self.emission_matrices()
        digits = joint_state_tokens(k, c)  # (S, K)
        out = np.ones((noisy.num_frames, c**k))
        for kk in range(k):
            out *= mats[kk][digits[:, kk][None, :], noisy.tokens[kk][:, None]]
        return out


def joint_state_tokens(num_codebooks: int, codebook_size: int) -> np.ndarray:
    """(S, K) table mapping joint state index to per-codebook token ids.

    Row-major convention: codebook 0 is the most significant digit, matching
    ``np.unravel_index``.
    """
    s = codebook_size**num_codebooks
    idx = np.unravel_index(np.arange(s), (codebook_size,) * num_codebooks)
    return np.stack(idx, axis=1).astype(np.int64)


def tokens_to_joint_states(tokens: np.ndarray, codebook_size: int) -> np.ndarray:
    """Inverse of :func:`joint_state_tokens` applied framewise to a K x T grid."""
    tokens = np.asarray(tokens)
    k = tokens.shape[0]
    return np.ravel_multi_index(tuple(tokens), (codebook_size,) * k).astype(np.int64)


def _as_rng(rng: np.random.Generator | int | None) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


def sample_clean(spec: ChannelSpec, num_frames: int, rng=None) -> TokenSequence:
    """Draw a clean K x T grid from the Markov source."""
    rng = _as_rng(rng)
    k, c = spec.codec.num_codebooks, spec.codec.codebook_size
    if num_frames < 0:
        raise ValidationError("num_frames must be >= 0")
    if spec.joint_source:
        states = _sample_chain(spec.source_init[0], spec.source_trans[0], num_frames, rng)
        tokens = joint_state_tokens(k, c)[states].T if num_frames else np.zeros((k, 0), int)
    else:
        tokens = np.stack(
            [_sample_chain(spec.source_init[i], spec.source_trans[i], num_frames, rng)
             for i in range(k)]
        )
    return TokenSequence(tokens, spec.codec)


def _sample_chain(pi: np.ndarray, a: np.ndarray, t: int, rng: np.random.Generator) -> np.ndarray:
    out = np.zeros(t, dtype=np.int64)
    if t == 0:
        return out
    n = pi.shape[0]
    out[0] = rng.choice(n, p=pi)
    for i in range(1, t):
        out[i] = rng.choice(n, p=a[out[i - 1]])
    return out


def corrupt(clean: TokenSequence, spec: ChannelSpec, rng=None) -> TokenSequence:
    """Substitute each position independently with probability r.

    A hit position is redrawn from the confusion row of its current token, so
    self-mass in the confusion matrix leaves some hits unchanged.
    """
    rng = _as_rng(rng)
    r = spec.rate
    k, t = clean.tokens.shape
    noisy = clean.tokens.copy()
    hits = rng.random((k, t)) < r
    for kk in range(k):
        conf = spec.confusion[kk]
        for tt in np.nonzero(hits[kk])[0]:
            noisy[kk, tt] = rng.choice(spec.codec.codebook_size, p=conf[clean.tokens[kk, tt]])
    return TokenSequence(noisy, spec.codec)


def exact_posteriors(noisy: TokenSequence, spec: ChannelSpec) -> np.ndarray:
    """Forward-backward posteriors P(y_t = s | x_{1..T}), shape (T, S).

    Exact over the joint hidden chain; only valid for C^K <= 4096.
    """
    pi, a = spec.joint_chain()
    emis = spec.joint_emissions(noisy)  # (T, S)
    t_len, s = emis.shape
    if t_len == 0:
        return np.zeros((0, s))
    alpha = np.zeros((t_len, s))
    beta = np.zeros((t_len, s))
    scale = np.zeros(t_len)
    alpha[0] = pi * emis[0]
    scale[0] = alpha[0].sum()
    if scale[0] <= 0:
        raise ValidationError("observation has zero likelihood under the channel")
    alpha[0] /= scale[0]
    for t in range(1, t_len):
        alpha[t] = (alpha[t - 1] @ a) * emis[t]
        scale[t] = alpha[t].sum()
        alpha[t] /= scale[t]
    beta[-1] = 1.0
    for t in range(t_len - 2, -1, -1):
        beta[t] = a @ (emis[t + 1] * beta[t + 1])
        beta[t] /= scale[t + 1]
    gamma = alpha * beta
    gamma /= gamma.sum(axis=1, keepdims=True)
    return gamma


def exact_map(noisy: TokenSequence, spec: ChannelSpec) -> TokenSequence:
    """Viterbi MAP decode argmax_y P(y | x) over the joint hidden chain."""
    pi, a = spec.joint_chain()
    emis = spec.joint_emissions(noisy)
    t_len, s = emis.shape
    k, c = spec.codec.num_codebooks, spec.codec.codebook_size
    if t_len == 0:
        return TokenSequence(np.zeros((k, 0), dtype=np.int64), spec.codec)
    with np.errstate(divide="ignore"):
        log_pi, log_a, log_e = np.log(pi), np.log(a), np.log(emis)
    delta = np.zeros((t_len, s))
    back = np.zeros((t_len, s), dtype=np.int64)
    delta[0] = log_pi + log_e[0]
    for t in range(1, t_len):
        cand = delta[t - 1][:, None] + log_a  # (from, to)
        back[t] = np.argmax(cand, axis=0)
        delta[t] = cand[back[t], np.arange(s)] + log_e[t]
    states = np.zeros(t_len, dtype=np.int64)
    states[-1] = int(np.argmax(delta[-1]))
    for t in range(t_len - 2, -1, -1):
        states[t] = back[t + 1][states[t + 1]]
    return TokenSequence(joint_state_tokens(k, c)[states].T, spec.codec)


def marginal_argmax(noisy: TokenSequence, spec: ChannelSpec,
                    per_codebook: bool = True) -> TokenSequence:
    """Per-step argmax of the exact posteriors: the conditionally-independent
    oracle (the ceiling for any model whose outputs factor across steps).

    With ``per_codebook`` the joint posterior is first marginalized per
    codebook, matching models whose heads also factor across codebooks.
    """
    gamma = exact_posteriors(noisy, spec)
    k, c = spec.codec.num_codebooks, spec.codec.codebook_size
    if per_codebook and k > 1:
        g = gamma.reshape(noisy.num_frames, *([c] * k))
        tokens = np.zeros((k, noisy.num_frames), dtype=np.int64)
        for kk in range(k):
            axes = tuple(1 + i for i in range(k) if i != kk)
            tokens[kk] = np.argmax(g.sum(axis=axes), axis=1)
    else:
        states = np.argmax(gamma, axis=1)
        tokens = joint_state_tokens(k, c)[states].T
    return TokenSequence(tokens.reshape(k, noisy.num_frames), spec.codec)


def log_joint(clean: TokenSequence, noisy: TokenSequence, spec: ChannelSpec) -> float:
    """log P(y, x) for a clean/noisy pair; differences give posterior ratios."""
    pi, a = spec.joint_chain()
    states = tokens_to_joint_states(clean.tokens, spec.codec.codebook_size)
    emis = spec.joint_emissions(noisy)
    with np.errstate(divide="ignore"):
        total = np.log(pi[states[0]]) if states.size else 0.0
        for t in range(1, states.size):
            total += np.log(a[states[t - 1], states[t]])
        for t in range(states.size):
            total += np.log(emis[t, states[t]])
    return float(total)


# ---------------------------------------------------------------------------
# Channel builders


def uniform_confusion(codebook_size: int, include_self: bool = False) -> np.ndarray:
    """Uniform replacement distribution, by default over the other C-1 tokens."""
    c = codebook_size
    if include_self:
        return np.full((c, c), 1.0 / c)
    m = np.full((c, c), 1.0 / (c - 1))
    np.fill_diagonal(m, 0.0)
    return m


def cycle_transitions(codebook_size: int, stay_on_cycle: float = 0.9,
                      offset: int = 1) -> np.ndarray:
    """Transition matrix concentrated on a cyclic successor.

    Probability ``stay_on_cycle`` of moving to (s + offset) mod C, remainder
    spread uniformly over the other tokens. Strong transitions make the joint
    MAP decode materially beat per-step marginal decoding under heavy noise,
    which is exactly the autoregressive-vs-independent testbed.
    """
    c = codebook_size
    a = np.full((c, c), (1.0 - stay_on_cycle) / (c - 1))
    for s in range(c):
        a[s, (s + offset) % c] = stay_on_cycle
    return a


def make_cycle_channel(codec: CodecSpec, noise_level_db: float, seed: int = 0,
                       stay_on_cycle: float = 0.9) -> ChannelSpec:
    """Strong-transition factored source + symmetric confusion channel."""
    c = codec.codebook_size
    init = tuple(np.full(c, 1.0 / c) for _ in range(codec.num_codebooks))
    trans = tuple(cycle_transitions(c, stay_on_cycle, offset=1 + k)
                  for k in range(codec.num_codebooks))
    conf = tuple(uniform_confusion(c) for _ in range(codec.num_codebooks))
    return ChannelSpec(codec, noise_level_db, init, trans, conf, seed=seed)


def make_uniform_channel(codec: CodecSpec, noise_level_db: float, seed: int = 0) -> ChannelSpec:
    """Memoryless uniform source + symmetric confusion (posterior = emission)."""
    c = codec.codebook_size
    init = tuple(np.full(c, 1.0 / c) for _ in range(codec.num_codebooks))
    trans = tuple(np.full((c, c), 1.0 / c) for _ in range(codec.num_codebooks))
    conf = tuple(uniform_confusion(c) for _ in range(codec.num_codebooks))
    return ChannelSpec(codec, noise_level_db, init, trans, conf, seed=seed)


def make_random_channel(codec: CodecSpec, noise_level_db: float, seed: int = 0,
                        concentration: float = 1.0, joint_source: bool = False) -> ChannelSpec:
    """Dirichlet-random source and confusion rows; for property tests."""
    rng = np.random.default_rng(seed)
    k, c = codec.num_codebooks, codec.codebook_size
    n = c**k if joint_source else c
    chains = 1 if joint_source else k

    def rows(m, size):
        return rng.dirichlet(np.full(size, concentration), size=m)

    init = tuple(rows(1, n)[0] for _ in range(chains))
    trans = tuple(rows(n, n) for _ in range(chains))
    conf = tuple(rows(c, c) for _ in range(k))
    return ChannelSpec(codec, noise_level_db, init, trans, conf,
                       seed=seed, joint_source=joint_source)


def bitrate_sweep_specs(base: ChannelSpec, k_values: Sequence[int]
                        ) -> list[tuple[CodecSpec, ChannelSpec]]:
    """Matched channel settings at different codebook counts.

    Each K in ``k_values`` gets a codec with K token streams (same C and frame
    rate as the base) and a channel whose per-codebook chains extend the base
    chains cyclically. Emulates a bitrate axis: token bits scale linearly in K.
    """
    if base.joint_source:
        raise ValidationError("bitrate sweep requires a factored-source base channel")
    out = []
    for k in k_values:
        if k < 1:
            raise ValidationError(f"codebook count must be >= 1, got {k}")
        codec = CodecSpec(
            num_codebooks=k,
            codebook_size=base.codec.codebook_size,
            frame_rate_hz=base.codec.frame_rate_hz,
            sample_rate_hz=base.codec.sample_rate_hz,
            name=f"{base.codec.name}-k{k}",
        )
        pick = lambda seq: tuple(seq[i % len(seq)] for i in range(k))
        spec = ChannelSpec(codec, base.noise_level_db, pick(base.source_init),
                           pick(base.source_trans), pick(base.confusion), seed=base.seed)
        out.append((codec, spec))
    return out


# ---------------------------------------------------------------------------
# Serialization (sidecar so oracles stay recomputable from disk)


def channel_spec_to_dict(spec: ChannelSpec) -> dict:
    return {
        "codec": {
            "num_codebooks": spec.codec.num_codebooks,
            "codebook_size": spec.codec.codebook_size,
            "frame_rate_hz": spec.codec.frame_rate_hz,
            "sample_rate_hz": spec.codec.sample_rate_hz,
            "name": spec.codec.name,
        },
        "noise_level_db": spec.noise_level_db,
        "seed": spec.seed,
        "joint_source": spec.joint_source,
        "source_init": [p.tolist() for p in spec.source_init],
        "source_trans": [a.tolist() for a in spec.source_trans],
        "confusion": [m.tolist() for m in spec.confusion],
    }


def channel_spec_from_dict(data: dict) -> ChannelSpec:
    codec = CodecSpec(**data["codec"])
    return ChannelSpec(
        codec,
        float(data["noise_level_db"]),
        tuple(np.asarray(p) for p in data["source_init"]),
        tuple(np.asarray(a) for a in data["source_trans"]),
        tuple(np.asarray(m) for m in data["confusion"]),
        seed=int(data["seed"]),
        joint_source=bool(data["joint_source"]),
    )
