"""Discrete-token speech enhancement lab.

Pipeline: tokenizer (codec) -> token language model (NAR encoder or
encoder/predictor/joiner transducer) -> detokenizer, plus a synthetic
Markov-channel data source with exact-inference oracles for grading the
models against Bayes ceilings.
"""

from tokse.core import (
    CodecSpec,
    Hypothesis,
    Manifest,
    ManifestEntry,
    SpecMismatchError,
    TokenSequence,
    ValidationError,
    WaveformBuffer,
    concat_time,
    read_manifest,
    read_tokseq,
    validate_token_sequence,
    write_manifest,
    write_tokseq,
)

__version__ = "0.1.0"
