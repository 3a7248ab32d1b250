"""Targeted clean-label poison crafting against the frozen-alignment recognizer.

The attack turns "make the victim transcribe the target utterance as the
adversarial word" into per-frame misclassification tasks, picks a budgeted
set of training frames whose (unchanged) alignment label equals each
task's adversarial state, and then perturbs only those frames' samples so
their penultimate features collapse onto the target frame's feature, for
several surrogate networks retrained from scratch every round.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .audio import (
    FrameConfig,
    Waveform,
    extract_features,
    feature_backward,
    feature_forward,
    power_spectrum,
    write_wav,
)
from .corpus import Dataset, Utterance
from .hmm import HmmModel, forced_align
from .masking import gradient_scale, hearing_thresholds, level_db
from .metrics import max_perturbation, snrseg
from .nnet import AcousticNet, NetArchitecture, TrainConfig, forward, init_network, penultimate_gradient, train
from .recognizer import log_posteriors, prepare_utterances, test_accuracy, transcribe, train_system
from .seeding import derive_seed


@dataclass(frozen=True)
class PoisonTask:
    frame_index: int        # frame within the target waveform
    original_state: int
    adversarial_state: int

    def __post_init__(self):
        if self.original_state == self.adversarial_state:
            raise ValueError("task must change the state")


@dataclass
class PoisonSet:
    tasks: list[PoisonTask]
    selections: list[list[tuple[str, int]]]   # per task: (utt_id, frame index)
    originals: dict[str, Waveform]            # frozen clean copies
    working: dict[str, np.ndarray]            # mutable samples under optimization
    frame_indices: dict[str, np.ndarray]      # sorted poison frames per utterance
    sample_masks: dict[str, np.ndarray]       # True on poison-frame samples

    @property
    def n_frames(self) -> int:
        return sum(len(sel) for sel in self.selections)

    def poisoned_seconds(self) -> float:
        return sum(float(np.count_nonzero(m)) / self.originals[u].sample_rate
                   for u, m in self.sample_masks.items())


@dataclass
class AttackConfig:
    budget: float                       # fraction of a state's frames to poison
    surrogate_arch: NetArchitecture
    surrogate_train: TrainConfig
    victim_arch: NetArchitecture
    victim_train: TrainConfig
    victim_schedule: str = "15N+3V+15N"
    n_surrogates: int = 2
    max_rounds: int = 10
    max_inner_steps: int = 50
    min_inner_steps: int = 1            # steps before the convergence break may fire
    inner_learning_rate: float = 1e-4
    convergence_delta: float = 1e-4
    margin_db: float | None = None      # None disables psychoacoustic shaping
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.budget < 1.0:
            raise ValueError("budget must lie in (0, 1)")
        if self.n_surrogates < 1 or self.max_rounds < 1 or self.max_inner_steps < 1:
            raise ValueError("n_surrogates, max_rounds and max_inner_steps must be >= 1")


@dataclass
class AttackReport:
    success: bool
    rounds_used: int
    wall_time_s: float
    poisoned_seconds: float
    poisoned_sample_count: int
    snrseg_db: float | None
    delta_max: float
    clean_accuracy_pct: float | None
    transcription: list[str]
    original_words: list[str]
    adversarial_words: list[str]
    n_tasks: int = 0
    poison_utterances: list[str] = field(default_factory=list)
    loss_trace: list[tuple[int, int, float]] = field(default_factory=list)

    def to_json(self) -> dict:
        out = {f.name: getattr(self, f.name) for f in fields(self)}
        out["loss_trace"] = [[int(r), int(s), float(v)] for r, s, v in self.loss_trace]
        return out


def state_frequencies(alignments: dict, n_states: int) -> np.ndarray:
    """Per-state frame counts over a set of alignments."""
    freqs = np.zeros(n_states, dtype=int)
    for ali in alignments.values():
        freqs += np.bincount(ali.states, minlength=n_states)
    return freqs


def poison_count(freq_y: int, budget: float) -> int:
    """Budgeted poison-frame count: ceil(freq * budget), at least one."""
    if freq_y < 1:
        raise ValueError("state never occurs in the training set")
    return int(np.ceil(freq_y * budget))


def _proportional_counts(weights: np.ndarray, total: int) -> np.ndarray:
    """Largest-remainder apportionment with a floor of one per entry."""
    quotas = weights / weights.sum() * total
    counts = np.floor(quotas).astype(int)
    remainder = total - counts.sum()
    order = np.lexsort((np.arange(weights.size), -(quotas - counts)))
    for i in range(remainder):
        counts[order[i]] += 1
    while np.any(counts == 0):
        zero = int(np.flatnonzero(counts == 0)[0])
        donor = int(np.argmax(counts))
        counts[donor] -= 1
        counts[zero] += 1
    return counts


def select_target_sequence(hmm: HmmModel, state_freqs: np.ndarray,
                           target_states: np.ndarray, original_word: str,
                           adversarial_word: str) -> list[PoisonTask]:
    """Relabel the original word's frame span with a typical adversarial path.

    Frames are apportioned to the adversarial word's states proportionally
    to how often each state occurs in the training alignments (largest
    remainder, every state at least once).
    """
    orig = hmm.entry(original_word)
    adv = hmm.entry(adversarial_word)
    target_states = np.asarray(target_states, dtype=int)
    in_span = (target_states >= orig.start) & (target_states <= orig.final)
    if not np.any(in_span):
        raise ValueError(f"target alignment contains no '{original_word}' frames")
    first = int(np.argmax(in_span))
    length = int(np.argmin(in_span[first:])) if not in_span[first:].all() else in_span.size - first
    span = np.arange(first, first + length)
    if span.size < adv.n_states:
        raise ValueError(
            f"span of {span.size} frames cannot realize {adv.n_states} states of '{adversarial_word}'"
        )
    weights = state_freqs[list(adv.states)].astype(float)
    if weights.sum() <= 0:
        raise ValueError(f"'{adversarial_word}' never occurs in the training alignments")
    counts = _proportional_counts(weights, span.size)
    z_path = np.repeat(np.array(list(adv.states)), counts)
    return [PoisonTask(int(f), int(target_states[f]), int(z))
            for f, z in zip(span, z_path)]


def support_reach(net: AcousticNet, frame_cfg: FrameConfig) -> int:
    """How many frames to each side feed one network decision.

    The acoustic input of frame f covers feature rows f +- context, and each
    row's delta/delta-delta terms reach a further 2 * delta_window frames.
    The poison perturbation must be allowed to act on this whole receptive
    field (the paper's 100-200 ms per poison): the frame's own 25 ms spans
    only a small fraction of the input dimensions, and confining the
    perturbation there leaves the feature collision unreachable.
    """
    return net.architecture.context_frames + 2 * frame_cfg.delta_window


def select_poison_frames(dataset: Dataset, alignments: dict, tasks: list[PoisonTask],
                         budget: float, net: AcousticNet, frame_cfg: FrameConfig,
                         target_features: np.ndarray,
                         features_by_id: dict | None = None) -> PoisonSet:
    """Pick, per task, the budgeted label-Z frames nearest in feature space.

    Nearness is squared distance between penultimate activations under one
    surrogate; selections are disjoint across tasks and deterministic
    (ties resolved by utterance id, then frame index).  The perturbation
    masks cover each selected frame's receptive field.
    """
    if features_by_id is None:
        features_by_id = {u.id: extract_features(u.waveform, frame_cfg) for u in dataset}
    pen_by_id = {}

    def penultimate(utt_id):
        if utt_id not in pen_by_id:
            pen_by_id[utt_id] = forward(net, features_by_id[utt_id])[1]
        return pen_by_id[utt_id]

    _, target_pen = forward(net, target_features)
    freqs = state_frequencies(alignments, net.architecture.output_size)

    candidates_by_state: dict[int, list[tuple[str, int]]] = {}
    for u in dataset:
        states = alignments[u.id].states
        for z in {t.adversarial_state for t in tasks}:
            for f in np.flatnonzero(states == z):
                candidates_by_state.setdefault(z, []).append((u.id, int(f)))

    used: set[tuple[str, int]] = set()
    selections = []
    for task in tasks:
        z = task.adversarial_state
        want = poison_count(int(freqs[task.original_state]), budget)
        pool = [c for c in candidates_by_state.get(z, []) if c not in used]
        if len(pool) < want:
            raise ValueError(
                f"only {len(pool)} unused frames labelled state {z} available, need {want}"
            )
        ref = target_pen[task.frame_index]
        scored = sorted(
            ((float(np.sum((penultimate(uid)[f] - ref) ** 2)), uid, f) for uid, f in pool)
        )
        chosen = [(uid, f) for _, uid, f in scored[:want]]
        used.update(chosen)
        selections.append(chosen)

    frame_indices: dict[str, set] = {}
    for sel in selections:
        for uid, f in sel:
            frame_indices.setdefault(uid, set()).add(f)
    reach = support_reach(net, frame_cfg)
    originals, working, masks, indices = {}, {}, {}, {}
    for uid, frames in frame_indices.items():
        u = dataset.by_id(uid)
        originals[uid] = u.waveform.copy()
        working[uid] = u.waveform.samples.copy()
        mask = np.zeros(len(u.waveform), dtype=bool)
        for f in frames:
            lo = max(0, (f - reach) * frame_cfg.hop_length)
            hi = (f + reach) * frame_cfg.hop_length + frame_cfg.frame_length
            mask[lo:hi] = True
        masks[uid] = mask
        indices[uid] = np.array(sorted(frames), dtype=int)
    return PoisonSet(tasks, selections, originals, working, indices, masks)


def bullseye_loss(poison_features: list[np.ndarray],
                  target_features: list[np.ndarray]) -> float:
    """Normalized squared distance of the poison centroid from the target,
    averaged over surrogates (with the conventional 1/2 factor)."""
    if len(poison_features) != len(target_features) or not poison_features:
        raise ValueError("need one poison matrix and one target vector per surrogate")
    m = len(target_features)
    total = 0.0
    for pens, tgt in zip(poison_features, target_features):
        pens = np.atleast_2d(pens)
        norm = float(tgt @ tgt)
        if norm == 0.0:
            raise ValueError("zero-norm target feature: normalization degenerate")
        diff = tgt - pens.mean(axis=0)
        total += float(diff @ diff) / norm
    return total / (2.0 * m)


def bullseye_gradients(poison_features: list[np.ndarray],
                       target_features: list[np.ndarray]) -> list[np.ndarray]:
    """d(bullseye_loss)/d(poison feature rows), one (P, H) matrix per surrogate."""
    m = len(target_features)
    grads = []
    for pens, tgt in zip(poison_features, target_features):
        pens = np.atleast_2d(pens)
        norm = float(tgt @ tgt)
        if norm == 0.0:
            raise ValueError("zero-norm target feature: normalization degenerate")
        centroid = pens.mean(axis=0)
        row = (centroid - tgt) / (m * norm * pens.shape[0])
        grads.append(np.tile(row, (pens.shape[0], 1)))
    return grads


def evaluate_victim(train_dataset: Dataset, x_t: Waveform, adversarial_words: list[str],
                    victim_arch: NetArchitecture, victim_train: TrainConfig,
                    victim_schedule: str, hmm: HmmModel, frame_cfg: FrameConfig,
                    test_set: Dataset | None, seed: int,
                    features_by_id: dict | None = None):
    """Train a fresh victim from scratch and check the target transcription.

    Returns (success, clean accuracy percent or None, transcription, net).
    """
    cfg = replace(victim_train, seed=seed)
    net, _ = train_system(train_dataset, hmm, frame_cfg, victim_arch, cfg,
                          victim_schedule, features_by_id)
    words = transcribe(net, hmm, frame_cfg, x_t)
    accuracy = None
    if test_set is not None and len(test_set) > 0:
        accuracy = test_accuracy(net, hmm, frame_cfg, test_set)[0]
    return words == list(adversarial_words), accuracy, words, net


def _poisoned_dataset(dataset: Dataset, pset: PoisonSet) -> Dataset:
    """Copy of the dataset with working poison samples written back, clipped."""
    utts = []
    for u in dataset:
        if u.id in pset.working:
            wav = Waveform(np.clip(pset.working[u.id], -1.0, 1.0),
                           u.waveform.sample_rate, u.id)
            utts.append(Utterance(wav, list(u.words), u.speaker))
        else:
            utts.append(u)
    return Dataset(utts, dataset.split, dataset.provenance + "+poison")


class _AdamState:
    def __init__(self, shape):
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.t = 0


def _adam_step(state: _AdamState, samples: np.ndarray, grad: np.ndarray,
               lr: float, betas=(0.9, 0.999), eps=1e-8) -> np.ndarray:
    state.t += 1
    b1, b2 = betas
    state.m = b1 * state.m + (1 - b1) * grad
    state.v = b2 * state.v + (1 - b2) * grad * grad
    m_hat = state.m / (1 - b1**state.t)
    v_hat = state.v / (1 - b2**state.t)
    return samples - lr * m_hat / (np.sqrt(v_hat) + eps)


class _Region:
    """Crafting window around a cluster of poison frames in one utterance.

    The window extends far enough past the cluster that features,
    penultimate rows and sample gradients at the poison frames computed on
    the slice equal the full-utterance values exactly (delta recursion and
    context stacking never see the slice boundary).
    """

    __slots__ = ("uid", "frame_lo", "frame_hi", "sample_lo", "sample_hi", "adam")

    def __init__(self, uid, frame_lo, frame_hi, cfg: FrameConfig):
        self.uid = uid
        self.frame_lo = frame_lo
        self.frame_hi = frame_hi
        self.sample_lo = frame_lo * cfg.hop_length
        self.sample_hi = frame_hi * cfg.hop_length + cfg.frame_length
        self.adam = _AdamState(self.sample_hi - self.sample_lo)

    def slice_of(self, samples: np.ndarray) -> np.ndarray:
        return samples[self.sample_lo:self.sample_hi]


def _build_regions(pset: PoisonSet, frame_cfg: FrameConfig, reach: int,
                   n_frames_by_uid: dict) -> tuple[list[_Region], dict]:
    """Merge poison frames into windows; map (uid, frame) -> (region, local row)."""
    margin = reach + 2 * frame_cfg.delta_window
    min_gap = int(np.ceil(frame_cfg.frame_length / frame_cfg.hop_length)) + 1
    regions = []
    frame_map = {}
    for uid in sorted(pset.frame_indices):
        last = n_frames_by_uid[uid] - 1
        intervals = [[max(0, f - margin), min(last, f + margin)]
                     for f in pset.frame_indices[uid]]
        intervals.sort()
        merged = [intervals[0]]
        for lo, hi in intervals[1:]:
            if lo <= merged[-1][1] + min_gap:
                merged[-1][1] = max(merged[-1][1], hi)
            else:
                merged.append([lo, hi])
        for lo, hi in merged:
            region = _Region(uid, lo, hi, frame_cfg)
            for f in pset.frame_indices[uid]:
                if lo <= f <= hi:
                    frame_map[(uid, int(f))] = (region, int(f) - lo)
            regions.append(region)
    return regions, frame_map


def craft_poisons(dataset: Dataset, x_t: Waveform, original_word: str,
                  adversarial_word: str, cfg: AttackConfig, *, hmm: HmmModel,
                  frame_cfg: FrameConfig, alignments: dict,
                  selection_net: AcousticNet, x_t_transcript: list[str] | None = None,
                  test_set: Dataset | None = None, out_dir=None):
    """Run the full poison-crafting loop; returns (poisoned dataset, report).

    Alignments are the attacker's frozen ones: poison frames keep their
    original labels throughout (clean-label contract), and only samples
    inside selected frames are ever modified.
    """
    t_start = time.perf_counter()
    if original_word == adversarial_word:
        raise ValueError("adversarial word equals the original word")
    if x_t_transcript is None:
        x_t_transcript = [original_word]
    if original_word not in x_t_transcript:
        raise ValueError(f"'{original_word}' not in the target transcript {x_t_transcript}")
    swap = x_t_transcript.index(original_word)
    adversarial_words = list(x_t_transcript)
    adversarial_words[swap] = adversarial_word

    features_clean = {u.id: extract_features(u.waveform, frame_cfg) for u in dataset}
    x_t_feats = extract_features(x_t, frame_cfg)
    target_ali = forced_align(hmm, log_posteriors(selection_net, x_t_feats),
                              hmm.with_silence(x_t_transcript))
    freqs = state_frequencies(alignments, hmm.n_states)
    tasks = select_target_sequence(hmm, freqs, target_ali.states,
                                   original_word, adversarial_word)
    pset = select_poison_frames(dataset, alignments, tasks, cfg.budget,
                                selection_net, frame_cfg, x_t_feats,
                                features_clean)
    nu = dataset.peak_amplitude()

    n_frames_by_uid = {uid: feats.shape[0] for uid, feats in features_clean.items()}
    regions, frame_map = _build_regions(
        pset, frame_cfg, support_reach(selection_net, frame_cfg), n_frames_by_uid)

    thresholds = None
    orig_spectra = None
    orig_peak = None
    if cfg.margin_db is not None:
        thresholds, orig_spectra, orig_peak = {}, {}, {}
        for uid, wav in pset.originals.items():
            cache = feature_forward(wav, frame_cfg)
            spec = power_spectrum(cache.frames, frame_cfg, wav.sample_rate)
            thresholds[uid] = hearing_thresholds(spec)
            orig_spectra[uid] = cache.spectrum
            orig_peak[uid] = float(np.max(np.abs(cache.spectrum)))

    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    trace: list[tuple[int, int, float]] = []
    rounds_used = 0
    poisoned = _poisoned_dataset(dataset, pset)
    success, accuracy, words, victim_net = evaluate_victim(
        poisoned, x_t, adversarial_words, cfg.victim_arch, cfg.victim_train,
        cfg.victim_schedule, hmm, frame_cfg, test_set,
        derive_seed(cfg.seed, "victim", 0), features_clean)

    for round_no in range(1, cfg.max_rounds + 1):
        if success:
            break
        rounds_used = round_no
        current_features = dict(features_clean)
        for uid in pset.working:
            current_features[uid] = extract_features(
                Waveform(pset.working[uid], pset.originals[uid].sample_rate, uid),
                frame_cfg)

        samples = [(current_features[u.id], alignments[u.id].states) for u in dataset]
        surrogates = []
        for m_idx in range(cfg.n_surrogates):
            seed = derive_seed(cfg.seed, "surrogate", round_no, m_idx)
            net = init_network(cfg.surrogate_arch, seed)
            net = train(net, samples, replace(cfg.surrogate_train, seed=seed))
            surrogates.append(net)
        target_pens = [forward(net, x_t_feats)[1] for net in surrogates]

        for region in regions:
            region.adam = _AdamState(region.sample_hi - region.sample_lo)
        rate = x_t.sample_rate
        prev_loss = None
        for step in range(1, cfg.max_inner_steps + 1):
            caches = {
                id(region): feature_forward(
                    Waveform(region.slice_of(pset.working[region.uid]), rate), frame_cfg)
                for region in regions
            }
            pens = [
                {id(region): forward(net, caches[id(region)].features)[1]
                 for region in regions}
                for net in surrogates
            ]
            total_loss = 0.0
            d_pen = [
                {rid: np.zeros_like(p) for rid, p in per_net.items()}
                for per_net in pens
            ]
            for task, sel in zip(pset.tasks, pset.selections):
                rows = []
                for m in range(cfg.n_surrogates):
                    rows.append(np.stack([
                        pens[m][id(frame_map[(uid, f)][0])][frame_map[(uid, f)][1]]
                        for uid, f in sel
                    ]))
                tgts = [target_pens[m][task.frame_index] for m in range(cfg.n_surrogates)]
                total_loss += bullseye_loss(rows, tgts)
                for m, grad_rows in enumerate(bullseye_gradients(rows, tgts)):
                    for (uid, f), row in zip(sel, grad_rows):
                        region, local = frame_map[(uid, f)]
                        d_pen[m][id(region)][local] += row
            total_loss /= len(pset.tasks)
            trace.append((round_no, step, total_loss))

            for region in regions:
                rid = id(region)
                cache = caches[rid]
                d_feats = np.zeros_like(cache.features)
                for m, net in enumerate(surrogates):
                    d_feats += penultimate_gradient(net, cache.features, d_pen[m][rid])
                d_feats /= len(pset.tasks)
                scale = None
                if cfg.margin_db is not None:
                    rows = slice(region.frame_lo, region.frame_hi + 1)
                    diff_mag = np.abs(cache.spectrum - orig_spectra[region.uid][rows])
                    d_level = level_db(diff_mag, orig_peak[region.uid])
                    scale = gradient_scale(d_level, thresholds[region.uid][rows],
                                           cfg.margin_db)
                grad = feature_backward(cache, d_feats, scale)
                grad[~pset.sample_masks[region.uid][region.sample_lo:region.sample_hi]] = 0.0
                updated = _adam_step(region.adam, region.slice_of(pset.working[region.uid]),
                                     grad, cfg.inner_learning_rate)
                pset.working[region.uid][region.sample_lo:region.sample_hi] = \
                    np.clip(updated, -1.0, 1.0)
            if (step >= cfg.min_inner_steps and prev_loss is not None
                    and prev_loss - total_loss < cfg.convergence_delta):
                break
            prev_loss = total_loss

        poisoned = _poisoned_dataset(dataset, pset)
        if out_dir is not None:
            round_dir = out_dir / f"round-{round_no:02d}"
            round_dir.mkdir(exist_ok=True)
            for uid in pset.working:
                write_wav(round_dir / f"{uid}.wav", poisoned.by_id(uid).waveform)
        poisoned_features = dict(features_clean)
        for uid in pset.working:
            poisoned_features[uid] = extract_features(poisoned.by_id(uid).waveform,
                                                      frame_cfg)
        success, accuracy, words, victim_net = evaluate_victim(
            poisoned, x_t, adversarial_words, cfg.victim_arch, cfg.victim_train,
            cfg.victim_schedule, hmm, frame_cfg, test_set,
            derive_seed(cfg.seed, "victim", round_no), poisoned_features)

    snr_values = []
    delta = 0.0
    for uid, orig in pset.originals.items():
        perturbed = poisoned.by_id(uid).waveform
        delta = max(delta, max_perturbation(orig, perturbed, nu))
        if np.any(perturbed.samples != orig.samples):
            snr_values.append(snrseg(orig, perturbed, mask=pset.sample_masks[uid]))
    report = AttackReport(
        success=success,
        rounds_used=rounds_used,
        wall_time_s=time.perf_counter() - t_start,
        poisoned_seconds=pset.poisoned_seconds(),
        poisoned_sample_count=pset.n_frames,
        snrseg_db=float(np.mean(snr_values)) if snr_values else None,
        delta_max=delta,
        clean_accuracy_pct=accuracy,
        transcription=words,
        original_words=list(x_t_transcript),
        adversarial_words=adversarial_words,
        n_tasks=len(tasks),
        poison_utterances=sorted(pset.working),
        loss_trace=trace,
    )
    # the last victim is kept for over-the-air re-evaluation; it is a plain
    # attribute, not a dataclass field, so serialization ignores it
    report.victim_net = victim_net
    if out_dir is not None:
        with open(out_dir / "loss_trace.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["round", "inner_step", "loss"])
            writer.writerows(report.to_json()["loss_trace"])
        with open(out_dir / "report.json", "w") as fh:
            json.dump(report.to_json(), fh, indent=2)
    return poisoned, report
