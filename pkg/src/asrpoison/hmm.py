"""Word-chain HMM: lexicon compilation, Viterbi decoding, forced alignment,
and the alternating train/realign loop.

Each word is a left-to-right chain of states with self-loop and advance
probability 0.5; a simple loop grammar lets any word follow any word, with
the 0.5 exit mass divided uniformly over word starts.  Ties in the dynamic
programs are broken toward the lower predecessor index, which makes the
selected path the minimum of the optimal set under reversed-lexicographic
order (the test oracles rely on this).
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field, replace

import numpy as np

LOG_HALF = float(np.log(0.5))
NEG_INF = -np.inf


@dataclass(frozen=True)
class WordEntry:
    name: str
    n_states: int
    start: int
    is_silence: bool = False

    @property
    def states(self) -> range:
        return range(self.start, self.start + self.n_states)

    @property
    def final(self) -> int:
        return self.start + self.n_states - 1


@dataclass
class HmmModel:
    entries: list[WordEntry]
    n_states: int
    log_trans: np.ndarray
    log_initial: np.ndarray
    state_entry: np.ndarray  # state index -> entry index
    is_start: np.ndarray
    is_final: np.ndarray
    by_name: dict = field(default_factory=dict)

    def entry(self, word: str) -> WordEntry:
        if word not in self.by_name:
            raise KeyError(f"word '{word}' not in lexicon")
        return self.by_name[word]

    @property
    def words(self) -> list[str]:
        return [e.name for e in self.entries]

    @property
    def content_words(self) -> list[str]:
        return [e.name for e in self.entries if not e.is_silence]

    def strip_silence(self, words: list[str]) -> list[str]:
        return [w for w in words if not self.by_name[w].is_silence]

    def with_silence(self, transcript: list[str]) -> list[str]:
        """Interleave the silence word around and between content words."""
        sil = [e.name for e in self.entries if e.is_silence]
        if not sil:
            return list(transcript)
        out = [sil[0]]
        for w in transcript:
            out.extend([w, sil[0]])
        return out


def build_hmm(lexicon: dict[str, int], silence_states: int = 3,
              silence_word: str = "sil") -> HmmModel:
    """Compile a word -> state-count lexicon into a loop-grammar state graph.

    States are numbered words-first in lexicon order, silence last.
    """
    if not lexicon:
        raise ValueError("empty lexicon")
    entries = []
    start = 0
    for name, k in lexicon.items():
        if k < 1:
            raise ValueError(f"word '{name}' needs at least one state")
        entries.append(WordEntry(name, int(k), start))
        start += int(k)
    if silence_states > 0:
        entries.append(WordEntry(silence_word, int(silence_states), start, is_silence=True))
        start += int(silence_states)

    s = start
    state_entry = np.zeros(s, dtype=int)
    is_start = np.zeros(s, dtype=bool)
    is_final = np.zeros(s, dtype=bool)
    for idx, e in enumerate(entries):
        state_entry[e.start:e.final + 1] = idx
        is_start[e.start] = True
        is_final[e.final] = True

    n_words = len(entries)
    trans = np.full((s, s), NEG_INF)
    exit_lp = LOG_HALF - np.log(n_words)
    for e in entries:
        for st in e.states:
            trans[st, st] = LOG_HALF
            if st != e.final:
                trans[st, st + 1] = LOG_HALF
        for other in entries:
            # loop grammar: word final may restart any word; a one-state
            # word keeps its (larger) self-loop probability
            trans[e.final, other.start] = max(trans[e.final, other.start], exit_lp)
    initial = np.full(s, NEG_INF)
    initial[is_start] = -np.log(n_words)

    return HmmModel(entries, s, trans, initial, state_entry, is_start, is_final,
                    {e.name: e for e in entries})


def digits_lexicon(total_states: int = 95, silence_states: int = 3) -> dict[str, int]:
    """Eleven-word digit-task lexicon whose states (with silence) sum to the target."""
    words = ["one", "two", "three", "four", "five", "six", "seven", "eight",
             "nine", "zero", "oh"]
    budget = total_states - silence_states
    base = budget // len(words)
    extra = budget % len(words)
    if base < 1:
        raise ValueError("total_states too small for eleven words")
    return {w: base + (1 if i < extra else 0) for i, w in enumerate(words)}


def readout(hmm: HmmModel, path: np.ndarray) -> list[str]:
    """Word sequence of a state path; word boundaries are final->start jumps.

    A one-state word's self-loop is read as continuation, not a restart.
    """
    path = np.asarray(path, dtype=int)
    words = [hmm.entries[hmm.state_entry[path[0]]].name]
    for prev, cur in zip(path[:-1], path[1:]):
        if hmm.is_final[prev] and hmm.is_start[cur] and prev != cur:
            words.append(hmm.entries[hmm.state_entry[cur]].name)
    return words


@dataclass
class Alignment:
    utterance_id: str
    states: np.ndarray

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=int)

    def __len__(self):
        return len(self.states)


def is_valid_path(hmm: HmmModel, states: np.ndarray) -> bool:
    states = np.asarray(states, dtype=int)
    if states.size == 0 or hmm.log_initial[states[0]] == NEG_INF:
        return False
    return all(hmm.log_trans[a, b] > NEG_INF for a, b in zip(states[:-1], states[1:]))


def viterbi_decode(hmm: HmmModel, log_posteriors: np.ndarray):
    """Max-sum decode; returns (words, state path, path log score)."""
    lp = np.asarray(log_posteriors, dtype=np.float64)
    if lp.ndim != 2 or lp.shape[0] == 0:
        raise ValueError("need at least one frame of posteriors")
    if lp.shape[1] != hmm.n_states:
        raise ValueError(f"posterior width {lp.shape[1]} != state count {hmm.n_states}")
    t_max = lp.shape[0]
    score = hmm.log_initial + lp[0]
    back = np.zeros((t_max, hmm.n_states), dtype=int)
    for t in range(1, t_max):
        cand = score[:, None] + hmm.log_trans
        best_prev = np.argmax(cand, axis=0)  # first max = lowest predecessor
        score = cand[best_prev, np.arange(hmm.n_states)] + lp[t]
        back[t] = best_prev
    final_state = int(np.argmax(score))
    path = np.zeros(t_max, dtype=int)
    path[-1] = final_state
    for t in range(t_max - 1, 0, -1):
        path[t - 1] = back[t, path[t]]
    return readout(hmm, path), path, float(score[final_state])


def transcript_states(hmm: HmmModel, transcript: list[str]) -> np.ndarray:
    """Concatenated state chain of a word sequence."""
    if not transcript:
        raise ValueError("empty transcript")
    return np.concatenate([np.array(list(hmm.entry(w).states)) for w in transcript])


def uniform_alignment(transcript: list[str], n_frames: int, hmm: HmmModel,
                      utterance_id: str = "") -> Alignment:
    """Divide frames evenly over the transcript's state chain, remainder first."""
    chain = transcript_states(hmm, transcript)
    if n_frames < chain.size:
        raise ValueError(f"{n_frames} frames cannot cover {chain.size} states")
    base, rem = divmod(n_frames, chain.size)
    counts = np.full(chain.size, base)
    counts[:rem] += 1
    return Alignment(utterance_id, np.repeat(chain, counts))


def forced_align(hmm: HmmModel, log_posteriors: np.ndarray, transcript: list[str],
                 utterance_id: str = "") -> Alignment:
    """Viterbi restricted to paths reading out exactly ``transcript``."""
    lp = np.asarray(log_posteriors, dtype=np.float64)
    if lp.ndim != 2 or lp.shape[0] == 0:
        raise ValueError("need at least one frame of posteriors")
    if lp.shape[1] != hmm.n_states:
        raise ValueError(f"posterior width {lp.shape[1]} != state count {hmm.n_states}")
    chain = transcript_states(hmm, transcript)
    n_pos = chain.size
    t_max = lp.shape[0]
    if t_max < n_pos:
        raise ValueError(
            f"no valid path: {t_max} frames < {n_pos} states of transcript {transcript}"
        )
    # advance score differs within a word (chain move) vs across words (exit)
    adv = np.empty(n_pos)
    adv[0] = NEG_INF
    pos_entry = hmm.state_entry[chain]
    for p in range(1, n_pos):
        adv[p] = hmm.log_trans[chain[p - 1], chain[p]]
        if pos_entry[p - 1] == pos_entry[p] and chain[p] != chain[p - 1] + 1:
            # repeated word: the jump is the grammar exit, not a chain move
            adv[p] = LOG_HALF - np.log(len(hmm.entries))
    stay = np.array([hmm.log_trans[s, s] for s in chain])

    score = np.full(n_pos, NEG_INF)
    score[0] = hmm.log_initial[chain[0]] + lp[0, chain[0]]
    came_from_prev = np.zeros((t_max, n_pos), dtype=bool)
    for t in range(1, t_max):
        stay_score = score + stay
        adv_score = np.concatenate(([NEG_INF], score[:-1] + adv[1:]))
        from_prev = adv_score >= stay_score  # tie: lower predecessor position
        score = np.where(from_prev, adv_score, stay_score) + lp[t, chain]
        came_from_prev[t] = from_prev
    if score[-1] == NEG_INF:
        raise ValueError("no valid path through the transcript")
    positions = np.zeros(t_max, dtype=int)
    positions[-1] = n_pos - 1
    for t in range(t_max - 1, 0, -1):
        positions[t - 1] = positions[t] - int(came_from_prev[t, positions[t]])
    return Alignment(utterance_id, chain[positions])


def parse_schedule(text: str) -> list[tuple[int, bool]]:
    """Parse '15N+3V+15N' style schedules into (epochs, realign?) phases."""
    phases = []
    for part in text.split("+"):
        m = re.fullmatch(r"(\d+)([NV])", part.strip(), flags=re.IGNORECASE)
        if not m:
            raise ValueError(f"bad schedule element '{part}' in '{text}'")
        phases.append((int(m.group(1)), m.group(2).upper() == "V"))
    return phases


def viterbi_training(utterances, hmm: HmmModel, arch, train_cfg, schedule,
                     log_posterior_floor: float = 1e-30):
    """Alternate acoustic training with forced realignment.

    ``utterances`` is a list of (utt_id, features, transcript) where the
    transcript already includes any silence tokens.  Starts from uniform
    alignments and a freshly initialized network; returns the trained net
    and the final alignments (dict utt_id -> Alignment).
    """
    from .nnet import forward, init_network, train
    from .seeding import derive_seed

    if isinstance(schedule, str):
        schedule = parse_schedule(schedule)
    alignments = {
        utt_id: uniform_alignment(transcript, feats.shape[0], hmm, utt_id)
        for utt_id, feats, transcript in utterances
    }
    net = init_network(arch, train_cfg.seed)

    def train_epochs(net, n_epochs, phase_tag):
        cfg = replace(train_cfg, epochs=n_epochs,
                      seed=derive_seed(train_cfg.seed, "phase", phase_tag))
        samples = [(feats, alignments[utt_id].states)
                   for utt_id, feats, _ in utterances]
        return train(net, samples, cfg)

    phase_no = 0
    for epochs, realign in schedule:
        if not realign:
            net = train_epochs(net, epochs, phase_no)
            phase_no += 1
            continue
        for _ in range(epochs):
            for utt_id, feats, transcript in utterances:
                post, _ = forward(net, feats)
                lp = np.log(np.maximum(post, log_posterior_floor))
                alignments[utt_id] = forced_align(hmm, lp, transcript, utt_id)
            net = train_epochs(net, 1, phase_no)
            phase_no += 1
    return net, alignments


def save_alignments(path, alignments: dict) -> None:
    """Line-oriented 'utt_id frame_idx state_idx' dump."""
    with open(path, "w") as fh:
        for utt_id in sorted(alignments):
            for frame, state in enumerate(alignments[utt_id].states):
                fh.write(f"{utt_id} {frame} {int(state)}\n")


def load_alignments(path) -> dict:
    rows: dict[str, list[tuple[int, int]]] = {}
    with open(path) as fh:
        for line in fh:
            utt_id, frame, state = line.split()
            rows.setdefault(utt_id, []).append((int(frame), int(state)))
    out = {}
    for utt_id, pairs in rows.items():
        pairs.sort()
        out[utt_id] = Alignment(utt_id, np.array([s for _, s in pairs]))
    return out


def save_lexicon(path, lexicon: dict[str, int], silence_states: int = 3,
                 silence_word: str = "sil") -> None:
    with open(path, "w") as fh:
        json.dump({"words": lexicon, "silence_states": silence_states,
                   "silence_word": silence_word}, fh, indent=2)


def load_lexicon(path):
    with open(path) as fh:
        data = json.load(fh)
    return data["words"], data.get("silence_states", 3), data.get("silence_word", "sil")
