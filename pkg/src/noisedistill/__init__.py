"""Desk-scale teacher-student training for noise-robust frame classification.

Simulate a parallel clean/noisy corpus with shoebox-room acoustics, train a
clean teacher, export its temperature-scaled top-k logits as a compact
binary stream, distill a noisy-domain student against them, and reproduce
the temperature/k and data-size sweeps as reproducible experiments.
"""

from .audio import AudioBuffer, mix_at_snr, read_wav, write_wav
from .codec import (
    CodecParams,
    SparseFrame,
    SparseTargets,
    select_topk,
    softmax_t,
    sparse_from_logits,
    sparse_posterior,
    topk_posterior,
    topk_posterior_c,
)
from .corpus import Corpus, SimConfig, UtteranceRecord, generate_corpus
from .estimator import FrameClassifier
from .features import FeatureMatrix, LogMelExtractor, MelBank, lfbe, mel_bank, stft_power
from .metrics import EvalReport, decode_tokens, evaluate, token_error_rate, werr
from .net import NetParams, TrainConfig, forward, hard_ce_loss, soft_ce_loss, train
from .pipeline import (
    ExperimentConfig,
    ExperimentRunner,
    RunReport,
    emit_report,
    load_config,
    run_experiment,
    sweep_size,
    sweep_tk,
)
from .room import ImpulseResponse, RoomSpec, convolve, derive_reflection_coeff, measure_t60, simulate_rir
from .stgt import decode_stream, encode_stream

__version__ = "0.1.0"
