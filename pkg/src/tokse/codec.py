"""Tokenizer/detokenizer realizations.

Three concrete pieces:

* ``SyntheticCodec`` — a fully deterministic residual quantizer over a fixed
  log-magnitude triangular filterbank. Stage k's codebook quantizes the
  residual left by stages 1..k-1. Codebooks are learned once by per-stage
  k-means over a seeded corpus of synthetic signals and frozen, mirroring
  how residual-VQ acoustic codecs are constructed, without any pretrained
  weights. Every downstream experiment is reproducible from the seed.
* ``KMeansQuantizer`` — plain Lloyd's k-means over continuous feature
  vectors; the single-codebook "semantic token" recipe.
* ``Dequantizer`` — a small regressor from token embeddings back to
  continuous features, trained via L2 loss; the learned half of the
  semantic detokenizer (vocoding proper is out of scope).

Waveform synthesis is a band-sinusoid bank with per-frame amplitudes and
continuous phase, overlap-added under a Hann window. It is not a vocoder;
it exists so the pipeline runs end to end on real WAV files with exact
length bookkeeping.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from tokse.archive import load_archive, save_archive
from tokse.core import CodecSpec, TokenSequence, ValidationError, WaveformBuffer
from tokse.model import SumEmbedding

_LOG_EPS = 1e-5


# ---------------------------------------------------------------------------
# Filterbank frontend


def _hann(n: int) -> np.ndarray:
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def _mel(f: np.ndarray | float) -> np.ndarray:
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def _mel_inv(m: np.ndarray) -> np.ndarray:
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@dataclass(frozen=True)
class FilterbankFrontend:
    """Deterministic log-magnitude triangular filterbank analysis/synthesis."""

    sample_rate_hz: int
    frame_rate_hz: float
    num_bands: int = 24

    @property
    def hop(self) -> int:
        return int(round(self.sample_rate_hz / self.frame_rate_hz))

    @property
    def win(self) -> int:
        return 2 * self.hop

    def _filters(self) -> tuple[np.ndarray, np.ndarray]:
        """(num_bands, bins) triangles and their center frequencies in Hz."""
        n_bins = self.win // 2 + 1
        freqs = np.fft.rfftfreq(self.win, d=1.0 / self.sample_rate_hz)
        edges = _mel_inv(np.linspace(_mel(60.0), _mel(self.sample_rate_hz / 2.0),
                                     self.num_bands + 2))
        bank = np.zeros((self.num_bands, n_bins))
        for b in range(self.num_bands):
            lo, mid, hi = edges[b], edges[b + 1], edges[b + 2]
            up = (freqs - lo) / (mid - lo)
            down = (hi - freqs) / (hi - mid)
            bank[b] = np.clip(np.minimum(up, down), 0.0, None)
            total = bank[b].sum()
            if total > 0:
                bank[b] /= total
        return bank, edges[1:-1]

    def num_frames(self, n_samples: int) -> int:
        return int(np.ceil(n_samples / self.hop))

    def analyze(self, wave: WaveformBuffer) -> np.ndarray:
        """(T, num_bands) log band magnitudes, T = ceil(duration * frame rate)."""
        if wave.sample_rate_hz != self.sample_rate_hz:
            raise ValidationError(
                f"wave at {wave.sample_rate_hz} Hz, frontend expects {self.sample_rate_hz}"
            )
        x = wave.samples
        if x.size == 0:
            raise ValidationError("cannot analyze an empty waveform")
        t_len = self.num_frames(x.size)
        padded = np.zeros(t_len * self.hop + (self.win - self.hop))
        padded[: x.size] = x
        window = _hann(self.win)
        bank, _ = self._filters()
        frames = np.stack(
            [padded[t * self.hop : t * self.hop + self.win] * window for t in range(t_len)]
        )
        mags = np.abs(np.fft.rfft(frames, axis=1))
        return np.log(_LOG_EPS + mags @ bank.T)

    def synthesize(self, features: np.ndarray) -> WaveformBuffer:
        """Band-sinusoid resynthesis; emits exactly T * hop samples."""
        features = np.asarray(features, dtype=np.float64)
        t_len = features.shape[0]
        if t_len == 0:
            return WaveformBuffer(np.zeros(0), self.sample_rate_hz)
        bank, centers = self._filters()
        gains = self._band_gains(bank, centers)
        amps = np.maximum(np.exp(features) - _LOG_EPS, 0.0) / gains[None, :]
        window = _hann(self.win)
        out = np.zeros(t_len * self.hop + (self.win - self.hop))
        norm = np.zeros_like(out)
        n = np.arange(self.win)
        for t in range(t_len):
            phases = 2.0 * np.pi * centers * (t * self.hop + n[:, None]) / self.sample_rate_hz
            frame = (np.sin(phases) * amps[t][None, :]).sum(axis=1)
            out[t * self.hop : t * self.hop + self.win] += frame * window
            norm[t * self.hop : t * self.hop + self.win] += window
        out = out[: t_len * self.hop] / np.maximum(norm[: t_len * self.hop], 1e-8)
        peak = np.abs(out).max()
        if peak > 0.99:
            out = out * (0.99 / peak)
        return WaveformBuffer(out, self.sample_rate_hz)

    def _band_gains(self, bank: np.ndarray, centers: np.ndarray) -> np.ndarray:
        """Measured linear band magnitude of a unit-amplitude center sinusoid;
        calibrates synthesis so analyze(synthesize(F)) is close to F."""
        window = _hann(self.win)
        n = np.arange(self.win)
        gains = np.zeros(self.num_bands)
        for b, f in enumerate(centers):
            tone = np.sin(2.0 * np.pi * f * n / self.sample_rate_hz) * window
            mag = np.abs(np.fft.rfft(tone))
            gains[b] = max(float(bank[b] @ mag), 1e-12)
        return gains


# ---------------------------------------------------------------------------
# Lloyd's k-means (ties to the lowest index, empty clusters reseeded)


@dataclass(frozen=True)
class KMeansQuantizer:
    centers: np.ndarray  # (n_clusters, feature_dim)

    def __post_init__(self) -> None:
        arr = np.asarray(self.centers, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[0] < 2:
            raise ValidationError("centers must be (n_clusters >= 2, feature_dim)")
        if not np.all(np.isfinite(arr)):
            raise ValidationError("centers must be finite")
        arr.setflags(write=False)
        object.__setattr__(self, "centers", arr)

    @property
    def n_clusters(self) -> int:
        return self.centers.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.centers.shape[1]


def assign_nearest(features: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """Nearest center per row by Euclidean distance; ties take the lowest index."""
    d2 = (
        (features**2).sum(axis=1, keepdims=True)
        - 2.0 * features @ centers.T
        + (centers**2).sum(axis=1)[None, :]
    )
    return np.argmin(d2, axis=1)  # argmin returns the first minimum


def train_kmeans(features: np.ndarray, n_clusters: int, seed: int = 0,
                 tol: float = 1e-6, max_iters: int = 300) -> KMeansQuantizer:
    """Lloyd iterations until max center displacement < tol.

    Empty clusters are reseeded to the point farthest from its assigned
    center, which keeps every cluster non-empty at convergence. Inertia is
    non-increasing across iterations (up to the reseeding steps, which only
    ever reduce it further).
    """
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2:
        raise ValidationError("features must be (n_points, feature_dim)")
    distinct = np.unique(features, axis=0)
    if distinct.shape[0] < n_clusters:
        raise ValidationError(
            f"need at least {n_clusters} distinct points, got {distinct.shape[0]}"
        )
    rng = np.random.default_rng(seed)
    centers = features[rng.choice(features.shape[0], size=n_clusters, replace=False)].copy()
    for _ in range(max_iters):
        labels = assign_nearest(features, centers)
        new_centers = centers.copy()
        for j in range(n_clusters):
            mask = labels == j
            if mask.any():
                new_centers[j] = features[mask].mean(axis=0)
        # reseed empties to the globally farthest point from its center
        for j in range(n_clusters):
            if not (labels == j).any():
                dist = ((features - new_centers[labels]) ** 2).sum(axis=1)
                far = int(np.argmax(dist))
                new_centers[j] = features[far]
                labels[far] = j
        shift = np.abs(new_centers - centers).max()
        centers = new_centers
        if shift < tol:
            break
    return KMeansQuantizer(centers)


def kmeans_inertia(features: np.ndarray, centers: np.ndarray) -> float:
    labels = assign_nearest(features, centers)
    return float(((features - centers[labels]) ** 2).sum())


def quantize(features: np.ndarray, q: KMeansQuantizer,
             frame_rate_hz: float = 50.0, sample_rate_hz: int = 16000,
             name: str = "kmeans") -> TokenSequence:
    """(T, F) features -> single-codebook token sequence of nearest centers."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[1] != q.feature_dim:
        raise ValidationError(
            f"features of dim {features.shape[-1] if features.ndim == 2 else '?'} "
            f"do not match quantizer dim {q.feature_dim}"
        )
    ids = assign_nearest(features, q.centers)
    spec = CodecSpec(1, q.n_clusters, frame_rate_hz, sample_rate_hz, name)
    return TokenSequence(ids[None, :], spec)


def dequantize_lookup(seq: TokenSequence, q: KMeansQuantizer) -> np.ndarray:
    """Tokens back to their assigned centers, (T, F)."""
    if seq.num_codebooks != 1:
        raise ValidationError("k-means lookup expects a single-codebook sequence")
    if seq.spec.codebook_size != q.n_clusters:
        raise ValidationError("sequence vocabulary does not match quantizer")
    return q.centers[seq.tokens[0]]


# ---------------------------------------------------------------------------
# Synthetic residual codec


@dataclass(frozen=True)
class SyntheticCodec:
    """Residual quantizer over the filterbank features; stage k quantizes the
    residual of stages 1..k-1. Deterministic given the seed."""

    spec: CodecSpec
    stage_codebooks: np.ndarray  # (K, C, num_bands)
    seed: int

    def __post_init__(self) -> None:
        books = np.asarray(self.stage_codebooks, dtype=np.float64)
        k, c = self.spec.num_codebooks, self.spec.codebook_size
        if books.shape[:2] != (k, c):
            raise ValidationError(
                f"codebooks shaped {books.shape}, expected ({k}, {c}, bands)"
            )
        if not np.all(np.isfinite(books)):
            raise ValidationError("codebooks must be finite")
        books.setflags(write=False)
        object.__setattr__(self, "stage_codebooks", books)

    @property
    def num_bands(self) -> int:
        return self.stage_codebooks.shape[2]

    @property
    def frontend(self) -> FilterbankFrontend:
        return FilterbankFrontend(self.spec.sample_rate_hz, self.spec.frame_rate_hz,
                                  self.num_bands)

    def encode_features(self, features: np.ndarray, num_stages: int | None = None
                        ) -> np.ndarray:
        """(T, bands) -> (K, T) token ids via residual nearest-center stages."""
        k = self.spec.num_codebooks if num_stages is None else num_stages
        residual = np.asarray(features, dtype=np.float64).copy()
        tokens = np.zeros((k, residual.shape[0]), dtype=np.int64)
        for kk in range(k):
            ids = assign_nearest(residual, self.stage_codebooks[kk])
            tokens[kk] = ids
            residual -= self.stage_codebooks[kk][ids]
        return tokens

    def decode_features(self, tokens: np.ndarray) -> np.ndarray:
        """(K', T) ids -> (T, bands) by summing the addressed codebook rows;
        accepts any prefix of the stages (K' <= K)."""
        tokens = np.asarray(tokens)
        out = np.zeros((tokens.shape[1], self.num_bands))
        for kk in range(tokens.shape[0]):
            out += self.stage_codebooks[kk][tokens[kk]]
        return out


def synthetic_signal_corpus(n_signals: int, duration_s: float, sample_rate_hz: int,
                            seed: int) -> list[WaveformBuffer]:
    """Seeded bank of sinusoid mixtures, chirps, and filtered noise bursts."""
    rng = np.random.default_rng(seed)
    n = int(duration_s * sample_rate_hz)
    t = np.arange(n) / sample_rate_hz
    waves = []
    for _ in range(n_signals):
        x = np.zeros(n)
        for _ in range(rng.integers(2, 5)):
            f0 = rng.uniform(80.0, sample_rate_hz / 2.5)
            sweep = rng.uniform(-0.3, 0.3) * f0
            amp = rng.uniform(0.05, 0.4)
            env = 0.5 + 0.5 * np.sin(2 * np.pi * rng.uniform(0.3, 2.0) * t + rng.uniform(0, 6.28))
            x += amp * env * np.sin(2 * np.pi * (f0 * t + 0.5 * sweep * t**2))
        x += rng.normal(0.0, rng.uniform(0.002, 0.02), size=n)
        peak = np.abs(x).max()
        if peak > 0.95:
            x *= 0.95 / peak
        waves.append(WaveformBuffer(x, sample_rate_hz))
    return waves


def build_synthetic_codec(spec: CodecSpec, seed: int = 0, num_bands: int = 24,
                          corpus: list[WaveformBuffer] | None = None) -> SyntheticCodec:
    """Learn per-stage codebooks by k-means over a seeded corpus, then freeze."""
    frontend = FilterbankFrontend(spec.sample_rate_hz, spec.frame_rate_hz, num_bands)
    if corpus is None:
        corpus = synthetic_signal_corpus(
            n_signals=max(24, 2 * spec.codebook_size // 3), duration_s=1.0,
            sample_rate_hz=spec.sample_rate_hz, seed=seed,
        )
    feats = np.concatenate([frontend.analyze(w) for w in corpus], axis=0)
    if feats.shape[0] < spec.codebook_size:
        raise ValidationError(
            f"corpus has {feats.shape[0]} frames, need >= C = {spec.codebook_size}"
        )
    books = np.zeros((spec.num_codebooks, spec.codebook_size, num_bands))
    residual = feats.copy()
    for kk in range(spec.num_codebooks):
        q = train_kmeans(residual, spec.codebook_size, seed=seed + kk)
        books[kk] = q.centers
        residual = residual - q.centers[assign_nearest(residual, q.centers)]
    return SyntheticCodec(spec, books, seed)


# ---------------------------------------------------------------------------
# Dequantizer: token embeddings -> continuous features, trained via L2


class Dequantizer(torch.nn.Module):
    """Sum-embedding of the K token streams followed by a linear read-out."""

    def __init__(self, num_codebooks: int, vocab_size: int, feature_dim: int,
                 embed_dim: int = 64):
        super().__init__()
        self.vocab_size = vocab_size
        self.feature_dim = feature_dim
        self.embed = SumEmbedding(num_codebooks, vocab_size, embed_dim)
        self.readout = torch.nn.Linear(embed_dim, feature_dim)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        return self.readout(self.embed(tokens))

    def reconstruct(self, seq: TokenSequence) -> np.ndarray:
        with torch.no_grad():
            out = self(torch.from_numpy(seq.tokens.copy()))
        return out.cpu().numpy()


def train_dequantizer(pairs: list[tuple[TokenSequence, np.ndarray]],
                      embed_dim: int = 64, epochs: int = 400, lr: float = 5e-2,
                      seed: int = 0) -> tuple[Dequantizer, float]:
    """Fit the regressor by mean squared error over all aligned frames.

    Returns the model and its final training loss. The loss must end below
    the variance of the targets (the constant-mean predictor's loss); the
    embedding table alone can already represent any exact per-token lookup.
    """
    if not pairs:
        raise ValidationError("empty dequantizer training set")
    for seq, feats in pairs:
        if seq.num_frames != np.asarray(feats).shape[0]:
            raise ValidationError("token/feature pair lengths differ")
    spec = pairs[0][0].spec
    feature_dim = np.asarray(pairs[0][1]).shape[1]
    torch.manual_seed(seed)
    model = Dequantizer(spec.num_codebooks, spec.codebook_size, feature_dim, embed_dim)
    tokens = torch.from_numpy(np.concatenate([s.tokens for s, _ in pairs], axis=1).copy())
    targets = torch.from_numpy(
        np.concatenate([np.asarray(f, dtype=np.float64) for _, f in pairs], axis=0)
    ).float()
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    loss = torch.tensor(float("inf"))
    for _ in range(epochs):
        opt.zero_grad()
        loss = torch.mean((model(tokens) - targets) ** 2)
        loss.backward()
        opt.step()
    model.eval()
    return model, float(loss.detach())


# ---------------------------------------------------------------------------
# Tokenize / detokenize dispatch


def tokenize(wave: WaveformBuffer, codec: SyntheticCodec) -> TokenSequence:
    """Waveform -> K x T token grid; T = ceil(duration * frame rate)."""
    if wave.sample_rate_hz != codec.spec.sample_rate_hz:
        raise ValidationError(
            f"wave at {wave.sample_rate_hz} Hz, codec expects {codec.spec.sample_rate_hz}"
        )
    if wave.samples.size == 0:
        raise ValidationError("cannot tokenize an empty waveform")
    features = codec.frontend.analyze(wave)
    return TokenSequence(codec.encode_features(features), codec.spec)


def detokenize(seq: TokenSequence, codec: SyntheticCodec) -> WaveformBuffer:
    """Token grid -> waveform of exactly T * hop samples (empty when T = 0)."""
    if seq.spec != codec.spec:
        raise ValidationError("sequence spec does not match codec spec")
    return codec.frontend.synthesize(codec.decode_features(seq.tokens))


# ---------------------------------------------------------------------------
# Codec checkpoints


def save_codec(codec: SyntheticCodec, path) -> None:
    meta = {
        "kind": "synthetic",
        "seed": codec.seed,
        "spec": {
            "num_codebooks": codec.spec.num_codebooks,
            "codebook_size": codec.spec.codebook_size,
            "frame_rate_hz": codec.spec.frame_rate_hz,
            "sample_rate_hz": codec.spec.sample_rate_hz,
            "name": codec.spec.name,
        },
    }
    save_archive(path, meta, {"stage_codebooks": codec.stage_codebooks})


def load_codec(path) -> SyntheticCodec:
    meta, arrays = load_archive(path)
    if meta.get("kind") != "synthetic":
        raise ValidationError(f"{path} is not a synthetic codec checkpoint")
    spec = CodecSpec(**meta["spec"])
    return SyntheticCodec(spec, arrays["stage_codebooks"].astype(np.float64),
                          int(meta["seed"]))
