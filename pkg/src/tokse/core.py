"""Shared domain types: codec descriptors, token grids, waveforms, manifests.

Token grids are stored codebook-major (K x T): both model families sum
embeddings over the codebook dimension per frame, so codebook-major rows
keep that access pattern contiguous. All types here are immutable after
construction and safe to share across threads.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

TOKSEQ_MAGIC = b"TOKSEQ\x00\x00" + b"\x00" * 8  # 16-byte container prefix
TOKSEQ_VERSION = 1


class ValidationError(ValueError):
    """Input violates a documented invariant."""


class SpecMismatchError(ValidationError):
    """Two objects that must share a codec spec do not."""


@dataclass(frozen=True)
class CodecSpec:
    """Describes a tokenization scheme: K codebooks of C entries at a frame rate.

    The start-of-sequence id is defined as ``codebook_size`` (i.e. C) and is
    only valid in predictor-input vocabularies of size C + 1; it never appears
    in a stored :class:`TokenSequence`.
    """

    num_codebooks: int
    codebook_size: int
    frame_rate_hz: float
    sample_rate_hz: int
    name: str = "codec"

    def __post_init__(self) -> None:
        if self.num_codebooks < 1:
            raise ValidationError(f"num_codebooks must be >= 1, got {self.num_codebooks}")
        if self.codebook_size < 2:
            raise ValidationError(f"codebook_size must be >= 2, got {self.codebook_size}")
        if not self.frame_rate_hz > 0:
            raise ValidationError(f"frame_rate_hz must be positive, got {self.frame_rate_hz}")
        if self.sample_rate_hz <= 0:
            raise ValidationError(f"sample_rate_hz must be positive, got {self.sample_rate_hz}")

    @property
    def start_token(self) -> int:
        return self.codebook_size

    def num_frames(self, duration_s: float) -> int:
        """T = ceil(duration_s * frame_rate_hz)."""
        return int(np.ceil(duration_s * self.frame_rate_hz - 1e-9))


@dataclass(frozen=True)
class TokenSequence:
    """A K x T grid of discrete token ids with its codec spec.

    Every entry lies in [0, C). The grid is held read-only; derive new
    sequences instead of mutating.
    """

    tokens: np.ndarray
    spec: CodecSpec

    def __post_init__(self) -> None:
        arr = np.asarray(self.tokens, dtype=np.int64)
        if arr.ndim == 1:
            arr = arr[None, :]
        if arr.ndim != 2:
            raise ValidationError(f"token grid must be 2-D (K x T), got shape {arr.shape}")
        arr = np.ascontiguousarray(arr)
        arr.setflags(write=False)
        object.__setattr__(self, "tokens", arr)
        validate_token_sequence(self)

    @property
    def num_frames(self) -> int:
        return self.tokens.shape[1]

    @property
    def num_codebooks(self) -> int:
        return self.tokens.shape[0]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, TokenSequence):
            return NotImplemented
        return self.spec == other.spec and np.array_equal(self.tokens, other.tokens)

    def __hash__(self) -> int:
        return hash((self.spec, self.tokens.tobytes()))


def validate_token_sequence(seq: TokenSequence) -> TokenSequence:
    """Check grid shape and id ranges; return the input unchanged if valid."""
    arr = seq.tokens
    if arr.shape[0] != seq.spec.num_codebooks:
        raise ValidationError(
            f"grid has {arr.shape[0]} codebooks, spec says {seq.spec.num_codebooks}"
        )
    if arr.size and (arr.min() < 0 or arr.max() >= seq.spec.codebook_size):
        bad = arr[(arr < 0) | (arr >= seq.spec.codebook_size)][0]
        raise ValidationError(
            f"token id {bad} outside [0, {seq.spec.codebook_size}) "
            f"(start token {seq.spec.start_token} never appears in stored sequences)"
        )
    return seq


def concat_time(a: TokenSequence, b: TokenSequence) -> TokenSequence:
    """Concatenate along time; both grids must share a codec spec."""
    if a.spec != b.spec:
        raise SpecMismatchError(f"cannot concat specs {a.spec.name}/K={a.spec.num_codebooks} "
                                f"and {b.spec.name}/K={b.spec.num_codebooks}")
    return TokenSequence(np.concatenate([a.tokens, b.tokens], axis=1), a.spec)


@dataclass(frozen=True)
class WaveformBuffer:
    """Mono waveform with samples in [-1, 1]."""

    samples: np.ndarray
    sample_rate_hz: int

    def __post_init__(self) -> None:
        arr = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if arr.size and not np.all(np.isfinite(arr)):
            raise ValidationError("waveform contains non-finite samples")
        if arr.size and (arr.min() < -1.0 - 1e-9 or arr.max() > 1.0 + 1e-9):
            raise ValidationError("waveform samples must lie in [-1, 1]")
        if self.sample_rate_hz <= 0:
            raise ValidationError("sample_rate_hz must be positive")
        arr.setflags(write=False)
        object.__setattr__(self, "samples", arr)

    @property
    def duration_s(self) -> float:
        return self.samples.size / self.sample_rate_hz


@dataclass(frozen=True)
class Hypothesis:
    """A partial decode: K x t token prefix plus its summed log-probability."""

    tokens: np.ndarray
    log_score: float

    def __post_init__(self) -> None:
        arr = np.ascontiguousarray(np.asarray(self.tokens, dtype=np.int64))
        arr.setflags(write=False)
        object.__setattr__(self, "tokens", arr)
        if self.log_score > 1e-9:
            raise ValidationError(f"log_score must be <= 0, got {self.log_score}")

    @property
    def length(self) -> int:
        return self.tokens.shape[1] if self.tokens.ndim == 2 else 0


@dataclass(frozen=True)
class ManifestEntry:
    utterance_id: str
    noisy_ref: str
    clean_ref: str
    duration_s: float

    def __post_init__(self) -> None:
        if not self.duration_s > 0:
            raise ValidationError(f"duration must be positive for {self.utterance_id!r}")


@dataclass(frozen=True)
class Manifest:
    """Ordered list of utterances; ids are unique."""

    entries: tuple[ManifestEntry, ...] = field(default_factory=tuple)

    def __post_init__(self) -> None:
        object.__setattr__(self, "entries", tuple(self.entries))
        ids = [e.utterance_id for e in self.entries]
        if len(set(ids)) != len(ids):
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            raise ValidationError(f"duplicate utterance ids: {dupes}")

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self) -> Iterable[ManifestEntry]:
        return iter(self.entries)

    @property
    def total_duration_s(self) -> float:
        return float(sum(e.duration_s for e in self.entries))


def write_manifest(manifest: Manifest, path: str | Path) -> None:
    records = [
        {"id": e.utterance_id, "noisy": e.noisy_ref, "clean": e.clean_ref,
         "duration_s": e.duration_s}
        for e in manifest.entries
    ]
    Path(path).write_text(json.dumps(records, indent=2) + "\n")


def read_manifest(path: str | Path) -> Manifest:
    try:
        records = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"malformed manifest {path}: {exc}") from exc
    if not isinstance(records, list):
        raise ValidationError(f"manifest {path} must be a JSON array")
    entries = []
    for rec in records:
        missing = {"id", "noisy", "clean", "duration_s"} - set(rec)
        if missing:
            raise ValidationError(f"manifest entry missing keys {sorted(missing)}")
        entries.append(ManifestEntry(rec["id"], rec["noisy"], rec["clean"],
                                     float(rec["duration_s"])))
    return Manifest(tuple(entries))


def write_tokseq(seq: TokenSequence, path: str | Path) -> None:
    """Binary token container: 16-byte magic, version byte, length-prefixed
    JSON header, then K*T row-major little-endian uint32 payload."""
    header = json.dumps({
        "k": seq.spec.num_codebooks,
        "c": seq.spec.codebook_size,
        "t": seq.num_frames,
        "frame_rate_hz": seq.spec.frame_rate_hz,
        "sample_rate_hz": seq.spec.sample_rate_hz,
        "name": seq.spec.name,
    }).encode("utf-8")
    payload = seq.tokens.astype("<u4").tobytes(order="C")
    with open(path, "wb") as fh:
        fh.write(TOKSEQ_MAGIC)
        fh.write(bytes([TOKSEQ_VERSION]))
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(payload)


def read_tokseq(path: str | Path) -> TokenSequence:
    blob = Path(path).read_bytes()
    if len(blob) < len(TOKSEQ_MAGIC) + 5 or blob[: len(TOKSEQ_MAGIC)] != TOKSEQ_MAGIC:
        raise ValidationError(f"{path} is not a TOKSEQ container")
    version = blob[len(TOKSEQ_MAGIC)]
    if version != TOKSEQ_VERSION:
        raise ValidationError(f"unsupported TOKSEQ version {version}")
    off = len(TOKSEQ_MAGIC) + 1
    (hlen,) = struct.unpack_from("<I", blob, off)
    off += 4
    try:
        header = json.loads(blob[off : off + hlen].decode("utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ValidationError(f"corrupt TOKSEQ header in {path}: {exc}") from exc
    off += hlen
    k, c, t = int(header["k"]), int(header["c"]), int(header["t"])
    expected = k * t * 4
    if len(blob) - off != expected:
        raise ValidationError(
            f"TOKSEQ payload of {len(blob) - off} bytes, expected {expected}"
        )
    tokens = np.frombuffer(blob, dtype="<u4", count=k * t, offset=off)
    tokens = tokens.reshape(k, t).astype(np.int64)
    spec = CodecSpec(
        num_codebooks=k,
        codebook_size=c,
        frame_rate_hz=float(header["frame_rate_hz"]),
        sample_rate_hz=int(header.get("sample_rate_hz", 16000)),
        name=str(header.get("name", "codec")),
    )
    return TokenSequence(tokens, spec)
