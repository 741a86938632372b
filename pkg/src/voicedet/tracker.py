"""NCCF-based voicing (and auxiliary F0) tracker with dynamic programming.

Single-pass NCCF at the full sample rate over a 20 ms correlation window,
frames at the same 10 ms hop as the STFT so tracker frames align 1:1 with
model/label frames. Candidate peaks are pruned by threshold and count and a
minimum-cost path through the candidate lattice yields per-frame voicing.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .dsp import FrameConfig, InvalidArgument, Waveform

_ENERGY_FLOOR = 1e-20


@dataclass(frozen=True)
class TrackerConfig:
    """Tracker parameters; defaults tuned on the synthetic corpus."""

    f0_min: float = 50.0
    f0_max: float = 500.0
    max_candidates_per_frame: int = 20
    voicing_bias: float = 0.45
    switch_cost: float = 0.3
    octave_jump_weight: float = 0.2
    nccf_threshold: float = 0.3
    corr_window_ms: float = 20.0
    # additive NCCF energy floor as a fraction of the utterance peak (RAPT's
    # a_fact); suppresses spurious periodicity in near-silent frames while
    # keeping phi invariant to overall amplitude scaling
    energy_floor: float = 0.01

    def __post_init__(self):
        if not (0 < self.f0_min < self.f0_max):
            raise InvalidArgument(f"need 0 < f0_min < f0_max, got {self.f0_min}, {self.f0_max}")
        if self.max_candidates_per_frame < 1:
            raise InvalidArgument("max_candidates_per_frame must be >= 1")
        for name in ("switch_cost", "octave_jump_weight"):
            if getattr(self, name) < 0:
                raise InvalidArgument(f"{name} must be >= 0")

    def lag_range(self, sample_rate: int) -> tuple[int, int]:
        """Inclusive (min_lag, max_lag) in samples for the F0 search band."""
        if self.f0_max >= sample_rate / 2:
            raise InvalidArgument(f"f0_max {self.f0_max} >= Nyquist of {sample_rate}")
        return math.ceil(sample_rate / self.f0_max), math.floor(sample_rate / self.f0_min)

    def to_text(self) -> str:
        lines = ["#voicedet-tracker-config v1"]
        for f in fields(self):
            lines.append(f"{f.name} = {getattr(self, f.name)!r}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "TrackerConfig":
        lines = [ln.strip() for ln in text.splitlines() if ln.strip()]
        if not lines or not lines[0].startswith("#voicedet-tracker-config v1"):
            raise InvalidArgument("not a v1 tracker config")
        defaults = cls()
        known = {f.name for f in fields(cls)}
        kwargs = {}
        for ln in lines[1:]:
            key, _, value = ln.partition("=")
            key = key.strip()
            if key not in known:
                raise InvalidArgument(f"unknown tracker config key: {key}")
            kwargs[key] = type(getattr(defaults, key))(value.strip())
        return cls(**kwargs)


@dataclass(frozen=True)
class NccfFrame:
    """Normalized cross-correlation values over candidate lags for one frame."""

    frame_index: int
    lags: np.ndarray
    values: np.ndarray
    short: bool = False  # frame ran past the signal end; treat as unvoiced-only


@dataclass(frozen=True)
class PitchCandidate:
    """One lag hypothesis; lag 0 is the unvoiced hypothesis."""

    lag: int
    score: float

    @property
    def voiced(self) -> bool:
        return self.lag > 0


@dataclass(frozen=True)
class VoicingLabels:
    """Per-frame binary voicing at a 10 ms hop, optionally with per-frame F0.

    `valid` optionally masks frames excluded from comparisons (e.g. an
    "uncertain" third class in provided reference labels).
    """

    labels: np.ndarray
    hop_ms: float = 10.0
    f0: np.ndarray | None = None
    valid: np.ndarray | None = None

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=np.int8)
        object.__setattr__(self, "labels", labels)
        if labels.ndim != 1:
            raise InvalidArgument("labels must be 1-D")
        if labels.size and not np.all((labels == 0) | (labels == 1)):
            raise InvalidArgument("labels must be binary")
        if self.f0 is not None:
            f0 = np.asarray(self.f0, dtype=np.float64)
            object.__setattr__(self, "f0", f0)
            if f0.shape != labels.shape:
                raise InvalidArgument("f0 length must match labels")
            if not np.array_equal(f0 > 0, labels == 1):
                raise InvalidArgument("f0 > 0 must hold exactly on voiced frames")
        if self.valid is not None:
            valid = np.asarray(self.valid, dtype=bool)
            object.__setattr__(self, "valid", valid)
            if valid.shape != labels.shape:
                raise InvalidArgument("valid mask length must match labels")

    def __len__(self) -> int:
        return self.labels.size

    @property
    def valid_mask(self) -> np.ndarray:
        if self.valid is None:
            return np.ones(self.labels.size, dtype=bool)
        return self.valid


def nccf(wave: Waveform, cfg: TrackerConfig, frame_cfg: FrameConfig) -> list[NccfFrame]:
    """Normalized cross-correlation per frame over the configured lag band.

    phi(t, k) = sum_i s(i) s(i+k) / sqrt((e(m) + A)(e(m+k) + A)) with a
    correlation window of cfg.corr_window_ms and an additive denominator
    floor A = (energy_floor * peak)^2 * window, RAPT's a_fact scaled to the
    utterance peak so phi stays amplitude-invariant. The analysis span
    (window + max lag) is centered on the frame's 10 ms slot so label smear
    at voicing transitions is symmetric. Frames whose span would run past
    either end of the signal are returned short and all-zero.
    """
    x = wave.samples
    sr = wave.sample_rate
    min_lag, max_lag = cfg.lag_range(sr)
    win = int(round(cfg.corr_window_ms * sr / 1000.0))
    hop = frame_cfg.hop
    n_frames = frame_cfg.n_frames(x.size) if x.size else 0
    lags = np.arange(min_lag, max_lag + 1)
    span = win + max_lag
    offset = hop // 2 - span // 2  # center the span on the frame slot

    # prefix sums of energy for the sliding denominators
    sq = np.concatenate([[0.0], np.cumsum(x * x)])
    peak = np.max(np.abs(x)) if x.size else 0.0
    floor = (cfg.energy_floor * peak) ** 2 * win

    out = []
    zeros = np.zeros(lags.size)
    for t in range(n_frames):
        m = t * hop + offset
        if m < 0 or m + span > x.size:
            out.append(NccfFrame(t, lags, zeros.copy(), short=True))
            continue
        seg = x[m : m + span]
        e0 = sq[m + win] - sq[m]
        if e0 <= _ENERGY_FLOOR:
            out.append(NccfFrame(t, lags, zeros.copy()))
            continue
        # cross terms for all lags at once: c[k] = sum_i seg[i] * seg[i + k]
        cross = np.correlate(seg, seg[:win], mode="valid")[min_lag : max_lag + 1]
        starts = m + lags
        energies = sq[starts + win] - sq[starts]
        denom = np.sqrt((e0 + floor) * (energies + floor))
        values = np.where(denom > _ENERGY_FLOOR, cross / np.maximum(denom, _ENERGY_FLOOR), 0.0)
        out.append(NccfFrame(t, lags, values))
    return out


def pick_candidates(frame: NccfFrame, cfg: TrackerConfig) -> list[PitchCandidate]:
    """Local NCCF maxima above threshold, capped by count, plus the unvoiced hypothesis.

    The unvoiced candidate (lag 0, score = voicing_bias) is always first, so
    downstream tie-breaks prefer unvoiced. Plateaus keep their earliest lag.
    """
    candidates = [PitchCandidate(0, cfg.voicing_bias)]
    if frame.short:
        return candidates
    v = frame.values
    if v.size:
        left = np.empty_like(v)
        left[0] = -np.inf
        left[1:] = v[:-1]
        right = np.empty_like(v)
        right[-1] = -np.inf
        right[:-1] = v[1:]
        # > left and >= right keeps the earliest sample of a plateau
        peak_mask = (v > left) & (v >= right) & (v > cfg.nccf_threshold)
        idx = np.nonzero(peak_mask)[0]
        order = sorted(idx, key=lambda i: (-v[i], frame.lags[i]))
        for i in order[: cfg.max_candidates_per_frame]:
            candidates.append(PitchCandidate(int(frame.lags[i]), float(v[i])))
    return candidates


def _transition_cost(prev: PitchCandidate, cur: PitchCandidate, cfg: TrackerConfig) -> float:
    if prev.voiced and cur.voiced:
        return cfg.octave_jump_weight * abs(math.log2(cur.lag / prev.lag))
    if prev.voiced != cur.voiced:
        return cfg.switch_cost
    return 0.0


def viterbi_path(
    candidates: list[list[PitchCandidate]], cfg: TrackerConfig
) -> tuple[list[int], float]:
    """Minimum-cost candidate-index path and its total cost.

    Local cost is 1 - score (the unvoiced hypothesis carries score =
    voicing_bias); transitions cost switch_cost across V/U boundaries and
    octave_jump_weight * |log2(lag ratio)| within voiced runs. Ties resolve
    to the lowest candidate index, i.e. unvoiced first, then shorter lags.
    """
    if not candidates:
        raise InvalidArgument("need at least one frame")
    n = len(candidates)
    costs = [1.0 - c.score for c in candidates[0]]
    backptr: list[list[int]] = [[0] * len(candidates[0])]
    for t in range(1, n):
        prev_cands = candidates[t - 1]
        cur = candidates[t]
        new_costs = []
        pointers = []
        for c in cur:
            best_j, best_cost = 0, math.inf
            for j, p in enumerate(prev_cands):
                total = costs[j] + _transition_cost(p, c, cfg)
                if total < best_cost:
                    best_j, best_cost = j, total
            new_costs.append(best_cost + (1.0 - c.score))
            pointers.append(best_j)
        costs = new_costs
        backptr.append(pointers)

    best = int(np.argmin(costs))
    total_cost = costs[best]
    path = [best]
    for t in range(n - 1, 0, -1):
        path.append(backptr[t][path[-1]])
    path.reverse()
    return path, total_cost


def viterbi_track(
    candidates: list[list[PitchCandidate]],
    cfg: TrackerConfig,
    sample_rate: int = 8000,
) -> VoicingLabels:
    """Voicing labels and F0 read off the minimum-cost lattice path."""
    path, _ = viterbi_path(candidates, cfg)
    n = len(candidates)
    labels = np.zeros(n, dtype=np.int8)
    f0 = np.zeros(n, dtype=np.float64)
    for t, j in enumerate(path):
        cand = candidates[t][j]
        if cand.voiced:
            labels[t] = 1
            f0[t] = sample_rate / cand.lag
    return VoicingLabels(labels=labels, f0=f0)


def path_cost(
    candidates: list[list[PitchCandidate]], path: list[int], cfg: TrackerConfig
) -> float:
    """Total cost of an explicit candidate-index path (used by oracles/tests).

    Accumulates transition then local cost per step, the same association as
    the DP recursion, so costs compare exactly.
    """
    total = 1.0 - candidates[0][path[0]].score
    for t in range(1, len(candidates)):
        prev = candidates[t - 1][path[t - 1]]
        cur = candidates[t][path[t]]
        total = total + _transition_cost(prev, cur, cfg)
        total = total + (1.0 - cur.score)
    return total


def track_voicing(
    wave: Waveform, cfg: TrackerConfig, frame_cfg: FrameConfig | None = None
) -> VoicingLabels:
    """nccf -> pick_candidates -> viterbi_track; one label per 10 ms STFT frame."""
    if frame_cfg is None:
        frame_cfg = FrameConfig.for_rate(wave.sample_rate)
    frames = nccf(wave, cfg, frame_cfg)
    candidates = [pick_candidates(f, cfg) for f in frames]
    labels = viterbi_track(candidates, cfg, wave.sample_rate)
    return replace(labels, hop_ms=1000.0 * frame_cfg.hop / wave.sample_rate)
