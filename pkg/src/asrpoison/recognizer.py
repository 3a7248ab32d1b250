"""Glue assembling features, acoustic net and HMM into a usable recognizer."""

from __future__ import annotations

import numpy as np

from .audio import FrameConfig, Waveform, extract_features
from .corpus import Dataset
from .hmm import HmmModel, viterbi_decode, viterbi_training
from .metrics import word_accuracy
from .nnet import AcousticNet, NetArchitecture, TrainConfig, forward

LOG_POSTERIOR_FLOOR = 1e-30


def log_posteriors(net: AcousticNet, features: np.ndarray) -> np.ndarray:
    post, _ = forward(net, features)
    return np.log(np.maximum(post, LOG_POSTERIOR_FLOOR))


def prepare_utterances(dataset: Dataset, hmm: HmmModel, frame_cfg: FrameConfig,
                       features_by_id: dict | None = None):
    """(utt_id, features, silence-expanded transcript) triples for training."""
    out = []
    for u in dataset:
        if features_by_id is not None and u.id in features_by_id:
            feats = features_by_id[u.id]
        else:
            feats = extract_features(u.waveform, frame_cfg)
        out.append((u.id, feats, hmm.with_silence(u.words)))
    return out


def train_system(dataset: Dataset, hmm: HmmModel, frame_cfg: FrameConfig,
                 arch: NetArchitecture, cfg: TrainConfig, schedule,
                 features_by_id: dict | None = None):
    """Viterbi-train a recognizer from scratch; returns (net, alignments)."""
    if arch.input_dim != frame_cfg.feature_dim:
        raise ValueError(
            f"architecture input {arch.input_dim} != feature width {frame_cfg.feature_dim}"
        )
    if arch.output_size != hmm.n_states:
        raise ValueError(
            f"architecture output {arch.output_size} != HMM state count {hmm.n_states}"
        )
    utts = prepare_utterances(dataset, hmm, frame_cfg, features_by_id)
    return viterbi_training(utts, hmm, arch, cfg, schedule,
                            log_posterior_floor=LOG_POSTERIOR_FLOOR)


def decode_features(net: AcousticNet, hmm: HmmModel, features: np.ndarray) -> list[str]:
    words, _, _ = viterbi_decode(hmm, log_posteriors(net, features))
    return hmm.strip_silence(words)


def transcribe(net: AcousticNet, hmm: HmmModel, frame_cfg: FrameConfig,
               w: Waveform) -> list[str]:
    return decode_features(net, hmm, extract_features(w, frame_cfg))


def test_accuracy(net: AcousticNet, hmm: HmmModel, frame_cfg: FrameConfig,
                  test_set: Dataset):
    """Clean word accuracy of a net over a held-out dataset."""
    refs, hyps = [], []
    for u in test_set:
        refs.append(list(u.words))
        hyps.append(transcribe(net, hmm, frame_cfg, u.waveform))
    return word_accuracy(refs, hyps)
