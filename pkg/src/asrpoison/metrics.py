"""Quantitative measures: segmental SNR, maximum perturbation, word accuracy."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .audio import Waveform

SNRSEG_SEGMENT_SECONDS = 0.0125  # 12.5 ms -> 200 samples at 16 kHz
SNRSEG_RATIO_FLOOR = 1e-20


@dataclass
class WordAlignmentCounts:
    n_ref: int = 0
    insertions: int = 0
    substitutions: int = 0
    deletions: int = 0

    def __add__(self, other: "WordAlignmentCounts") -> "WordAlignmentCounts":
        return WordAlignmentCounts(
            self.n_ref + other.n_ref,
            self.insertions + other.insertions,
            self.substitutions + other.substitutions,
            self.deletions + other.deletions,
        )


def default_segment_length(sample_rate: int) -> int:
    return int(round(SNRSEG_SEGMENT_SECONDS * sample_rate))


def _segment_ranges(mask: np.ndarray | None, n: int, seg_len: int):
    """Non-overlapping windows of seg_len over each contiguous masked run.

    A trailing partial window is kept so short perturbed runs still count.
    """
    if mask is None:
        runs = [(0, n)]
    else:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (n,):
            raise ValueError(f"mask length {mask.shape} does not match signal length {n}")
        edges = np.flatnonzero(np.diff(np.concatenate(([False], mask, [False])).astype(int)))
        runs = list(zip(edges[0::2], edges[1::2]))
    out = []
    for start, stop in runs:
        pos = start
        while pos < stop:
            out.append((pos, min(pos + seg_len, stop)))
            pos += seg_len
    return out


def snrseg(original: Waveform, poisoned: Waveform, segment_length: int | None = None,
           mask: np.ndarray | None = None) -> float:
    """Segment-averaged SNR in dB; ``mask`` restricts scoring to perturbed samples.

    Segments whose noise energy is exactly zero are excluded from the
    average; if every segment is noiseless there is nothing to measure and
    a ValueError is raised.
    """
    if len(original) != len(poisoned):
        raise ValueError("waveform lengths differ")
    if segment_length is None:
        segment_length = default_segment_length(original.sample_rate)
    noise = poisoned.samples - original.samples
    total = 0.0
    k = 0
    for start, stop in _segment_ranges(mask, len(original), segment_length):
        noise_energy = float(np.sum(noise[start:stop] ** 2))
        if noise_energy == 0.0:
            continue
        signal_energy = float(np.sum(original.samples[start:stop] ** 2))
        total += np.log10(max(signal_energy / noise_energy, SNRSEG_RATIO_FLOOR))
        k += 1
    if k == 0:
        raise ValueError("no perturbation to measure: every segment is noiseless")
    return 10.0 * total / k


def max_perturbation(original: Waveform, poisoned: Waveform, nu: float) -> float:
    """Largest per-sample difference relative to the dataset peak amplitude ``nu``."""
    if len(original) != len(poisoned):
        raise ValueError("waveform lengths differ")
    if nu <= 0:
        raise ValueError(f"dataset peak amplitude must be positive, got {nu}")
    return float(np.max(np.abs(original.samples / nu - poisoned.samples / nu)))


def _align_counts(ref: list[str], hyp: list[str]) -> WordAlignmentCounts:
    """Levenshtein alignment; on cost ties prefer substitution > insertion > deletion."""
    r, h = len(ref), len(hyp)
    cost = np.zeros((r + 1, h + 1), dtype=int)
    cost[:, 0] = np.arange(r + 1)
    cost[0, :] = np.arange(h + 1)
    for i in range(1, r + 1):
        for j in range(1, h + 1):
            sub = cost[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1])
            ins = cost[i, j - 1] + 1
            dele = cost[i - 1, j] + 1
            cost[i, j] = min(sub, ins, dele)
    counts = WordAlignmentCounts(n_ref=r)
    i, j = r, h
    while i > 0 or j > 0:
        if i > 0 and j > 0 and cost[i, j] == cost[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]):
            counts.substitutions += int(ref[i - 1] != hyp[j - 1])
            i, j = i - 1, j - 1
        elif j > 0 and cost[i, j] == cost[i, j - 1] + 1:
            counts.insertions += 1
            j -= 1
        else:
            counts.deletions += 1
            i -= 1
    return counts


def word_accuracy(references: list[list[str]], hypotheses: list[list[str]]):
    """Accuracy percent (N - I - S - D) / N over the whole set, plus the counts.

    Can go negative when hypotheses insert many words; that is allowed.
    """
    if len(references) != len(hypotheses):
        raise ValueError("reference and hypothesis lists differ in length")
    counts = WordAlignmentCounts()
    for ref, hyp in zip(references, hypotheses):
        counts = counts + _align_counts(list(ref), list(hyp))
    if counts.n_ref == 0:
        raise ValueError("no reference words to score")
    acc = 100.0 * (counts.n_ref - counts.insertions - counts.substitutions
                   - counts.deletions) / counts.n_ref
    return acc, counts


def aggregate(reports: list) -> dict:
    """Success rate and metric means over a list of AttackReport objects."""
    if not reports:
        raise ValueError("no reports to aggregate")

    def mean_of(name):
        vals = [getattr(r, name) for r in reports if getattr(r, name) is not None]
        return float(np.mean(vals)) if vals else float("nan")

    return {
        "n_trials": len(reports),
        "success_rate_pct": 100.0 * sum(1 for r in reports if r.success) / len(reports),
        "clean_accuracy_pct": mean_of("clean_accuracy_pct"),
        "poisoned_seconds": mean_of("poisoned_seconds"),
        "poisoned_sample_count": mean_of("poisoned_sample_count"),
        "snrseg_db": mean_of("snrseg_db"),
        "delta_max": mean_of("delta_max"),
        "attack_steps": mean_of("rounds_used"),
        "wall_time_s": mean_of("wall_time_s"),
    }
