"""Synthetic speech-like corpus generation plus external WAV dataset loading.

Each vocabulary word is a fixed sequence of two-band tone segments; per
speaker the band frequencies and segment durations are jittered from a
seed-derived stream.  The result is nowhere near real speech, but it gives
the recognizer acoustically distinct word classes with speaker variation,
which is all the poisoning pipeline needs, and it is bit-reproducible.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .audio import Waveform, quantize, read_wav, write_wav
from .seeding import rng_for

# Words are sequences over a shared two-band segment inventory ("phones"),
# so single frames are ambiguous between words (as in real speech) while
# the segment sequence identifies the word.  All pairs of words differ in
# at least four of five positions.
_PHONES = {
    0: (450.0, 2200.0),
    1: (650.0, 1900.0),
    2: (850.0, 1600.0),
    3: (1050.0, 1400.0),
    4: (600.0, 2500.0),
    5: (900.0, 1200.0),
}
_SEGMENT_SECONDS = 0.10


def _word_recipe(phones):
    return [(_PHONES[p][0], _PHONES[p][1], _SEGMENT_SECONDS) for p in phones]


DEFAULT_VOCABULARY = {
    "bip": _word_recipe([0, 1, 2, 3, 5]),
    "dap": _word_recipe([2, 1, 0, 4, 3]),
    "kor": _word_recipe([4, 0, 3, 2, 1]),
    "mul": _word_recipe([3, 2, 4, 1, 0]),
}


@dataclass
class Utterance:
    waveform: Waveform
    words: list[str]
    speaker: str

    @property
    def id(self) -> str:
        return self.waveform.id


@dataclass
class Dataset:
    utterances: list[Utterance]
    split: str = "train"
    provenance: str = ""

    def __post_init__(self):
        ids = [u.id for u in self.utterances]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate utterance ids in dataset")

    def __len__(self):
        return len(self.utterances)

    def __iter__(self):
        return iter(self.utterances)

    @property
    def speakers(self) -> list[str]:
        return sorted({u.speaker for u in self.utterances})

    def by_id(self, utt_id: str) -> Utterance:
        for u in self.utterances:
            if u.id == utt_id:
                return u
        raise KeyError(utt_id)

    def peak_amplitude(self) -> float:
        return max(float(np.max(np.abs(u.waveform.samples))) for u in self.utterances)

    def total_seconds(self) -> float:
        return sum(u.waveform.duration for u in self.utterances)


@dataclass
class CorpusSpec:
    vocabulary: dict = field(default_factory=lambda: dict(DEFAULT_VOCABULARY))
    n_speakers: int = 10
    utterances_per_speaker: int = 30
    words_per_utterance: tuple[int, int] = (1, 3)
    noise_floor: float = 0.012
    seed: int = 0
    sample_rate: int = 16000
    silence_seconds: float = 0.09
    train_fraction: float = 0.5
    pitch_jitter_octaves: float = 0.15  # per segment, on top of the speaker
    speaker_pitch_octaves: float = 0.15

    def __post_init__(self):
        if len(self.vocabulary) < 2:
            raise ValueError("vocabulary needs at least two words")
        recipes = [tuple(map(tuple, segs)) for segs in self.vocabulary.values()]
        if len(set(recipes)) != len(recipes):
            raise ValueError("word recipes must be pairwise distinct")
        lo, hi = self.words_per_utterance
        if not 1 <= lo <= hi:
            raise ValueError("bad words_per_utterance range")


def _ramp(n: int, edge: int) -> np.ndarray:
    env = np.ones(n)
    e = min(edge, n // 2)
    if e > 0:
        env[:e] = np.linspace(0.0, 1.0, e, endpoint=False)
        env[-e:] = np.linspace(1.0, 0.0, e)
    return env


def _render_word(recipe, rate, pitch, tempo, jitter, rng) -> np.ndarray:
    chunks = []
    for lo, hi, dur in recipe:
        n = max(int(round(dur * tempo * rate)), 32)
        t = np.arange(n) / rate
        amp = rng.uniform(0.16, 0.28)
        # bands jitter independently: a common factor would leave the
        # lo/hi ratio as a clean class fingerprint
        f_lo = lo * pitch * float(2.0 ** rng.uniform(-jitter, jitter))
        f_hi = hi * pitch * float(2.0 ** rng.uniform(-jitter, jitter))
        seg = (amp * np.sin(2 * np.pi * f_lo * t + rng.uniform(0, 2 * np.pi))
               + amp * np.sin(2 * np.pi * f_hi * t + rng.uniform(0, 2 * np.pi)))
        chunks.append(seg * _ramp(n, int(0.005 * rate)))
    return np.concatenate(chunks)


def _render_utterance(spec: CorpusSpec, words, pitch, tempo, rng) -> np.ndarray:
    rate = spec.sample_rate
    gap = int(spec.silence_seconds * rate)
    parts = [np.zeros(gap)]
    for word in words:
        parts.append(_render_word(spec.vocabulary[word], rate, pitch, tempo,
                                  spec.pitch_jitter_octaves, rng))
        parts.append(np.zeros(gap))
    samples = np.concatenate(parts)
    samples = samples + spec.noise_floor * rng.standard_normal(samples.size)
    return quantize(np.clip(samples, -1.0, 1.0))


def generate_corpus(spec: CorpusSpec) -> tuple[Dataset, Dataset]:
    """Deterministically synthesize (train, test) with disjoint speaker sets."""
    words = list(spec.vocabulary)
    speakers = [f"spk{i:02d}" for i in range(spec.n_speakers)]
    n_train = int(round(spec.train_fraction * spec.n_speakers))
    if not 0 < n_train < spec.n_speakers:
        raise ValueError("train fraction leaves an empty split")

    train, test = [], []
    lo, hi = spec.words_per_utterance
    for s_idx, speaker in enumerate(speakers):
        srng = rng_for(spec.seed, "speaker", s_idx)
        pitch = float(2.0 ** srng.uniform(-spec.speaker_pitch_octaves,
                                          spec.speaker_pitch_octaves))
        tempo = float(srng.uniform(0.9, 1.1))
        for j in range(spec.utterances_per_speaker):
            urng = rng_for(spec.seed, "utt", s_idx, j)
            count = int(urng.integers(lo, hi + 1))
            utt_words = [words[k] for k in urng.integers(0, len(words), count)]
            samples = _render_utterance(spec, utt_words, pitch, tempo, urng)
            wav = Waveform(samples, spec.sample_rate, f"{speaker}_u{j:03d}")
            bucket = train if s_idx < n_train else test
            bucket.append(Utterance(wav, utt_words, speaker))
    prov = f"synthetic(seed={spec.seed})"
    return Dataset(train, "train", prov), Dataset(test, "test", prov)


def split_speakers(dataset: Dataset, fraction: float, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Speaker-level partition: sorted speaker ids, first ``fraction`` cut.

    The cut is deterministic by construction; ``seed`` is accepted for
    interface stability but does not influence it.
    """
    speakers = dataset.speakers
    if len(speakers) < 2:
        raise ValueError("need at least two speakers to split")
    n_first = int(round(fraction * len(speakers)))
    if not 0 < n_first < len(speakers):
        raise ValueError(f"fraction {fraction} leaves an empty side")
    first = set(speakers[:n_first])
    a = [u for u in dataset if u.speaker in first]
    b = [u for u in dataset if u.speaker not in first]
    return (Dataset(a, dataset.split, dataset.provenance + "/split1"),
            Dataset(b, dataset.split, dataset.provenance + "/split2"))


def load_external(manifest_path, lexicon: list[str] | None = None,
                  expected_rate: int = 16000, split: str = "train") -> Dataset:
    """Load a WAV dataset from a 'path,transcript,speaker' manifest CSV."""
    manifest_path = Path(manifest_path)
    utterances = []
    with open(manifest_path, newline="") as fh:
        for row_no, row in enumerate(csv.reader(fh), start=1):
            if not row or row[0].startswith("#"):
                continue
            if len(row) != 3:
                raise ValueError(f"{manifest_path}:{row_no}: expected 'path,transcript,speaker'")
            rel, transcript, speaker = (c.strip() for c in row)
            wav_path = manifest_path.parent / rel
            if not wav_path.exists():
                raise ValueError(f"{manifest_path}:{row_no}: missing file {wav_path}")
            wav = read_wav(wav_path, wav_path.stem)
            if wav.sample_rate != expected_rate:
                raise ValueError(
                    f"{manifest_path}:{row_no}: {wav_path} has rate {wav.sample_rate}, expected {expected_rate}"
                )
            words = transcript.split()
            if lexicon is not None:
                unknown = [w for w in words if w not in lexicon]
                if unknown:
                    raise ValueError(f"{manifest_path}:{row_no}: unknown words {unknown}")
            utterances.append(Utterance(wav, words, speaker))
    return Dataset(utterances, split, f"external({manifest_path})")


def save_dataset(dataset: Dataset, directory) -> None:
    directory = Path(directory)
    (directory / "audio").mkdir(parents=True, exist_ok=True)
    rows = []
    for u in dataset:
        rel = f"audio/{u.id}.wav"
        write_wav(directory / rel, u.waveform)
        rows.append((rel, " ".join(u.words), u.speaker))
    with open(directory / "manifest.csv", "w", newline="") as fh:
        csv.writer(fh).writerows(rows)
    with open(directory / "meta.json", "w") as fh:
        json.dump({"split": dataset.split, "provenance": dataset.provenance}, fh, indent=2)


def load_dataset(directory) -> Dataset:
    directory = Path(directory)
    with open(directory / "meta.json") as fh:
        meta = json.load(fh)
    ds = load_external(directory / "manifest.csv", split=meta["split"])
    ds.provenance = meta["provenance"]
    return ds
