"""Reference-label generation, label file I/O, comparison, and alignment.

Reference voicing labels come from high-pass-filtered laryngograph signals
run through the NCCF/DP tracker; pretraining pseudo-labels come from the
same tracker applied directly to microphone recordings.

Label file format (bit-exact round trip):
    #hop_ms=10
    <frame_index>\t<label 0|1>\t<f0_hz as %.3f>
Shift sign convention: a positive shift moves the estimate later in time
relative to the reference.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dsp import InvalidArgument, Waveform, apply_fir, design_kaiser_highpass
from .tracker import TrackerConfig, VoicingLabels, track_voicing

KAISER_BETA = 5.0
KAISER_ORDER = 2400
CUTOFF_HZ = {"female": 25.0, "male": 15.0}

MAX_LENGTH_SLACK = 2  # frames of length mismatch tolerated before demanding alignment


@dataclass(frozen=True)
class SpeakerMeta:
    speaker_id: str
    sex: str = "unknown"

    def __post_init__(self):
        if self.sex not in ("male", "female", "unknown"):
            raise InvalidArgument(f"sex must be male/female/unknown, got {self.sex!r}")


@dataclass(frozen=True)
class LabelComparison:
    mismatch_rate: float  # percent
    n_frames: int
    shift_applied: int = 0

    def __post_init__(self):
        if not (0.0 <= self.mismatch_rate <= 100.0):
            raise InvalidArgument("mismatch_rate out of [0, 100]")
        if self.n_frames <= 0:
            raise InvalidArgument("n_frames must be positive")


def extract_reference_labels(
    laryn: Waveform,
    meta: SpeakerMeta,
    tracker_cfg: TrackerConfig | None = None,
    cutoff_hz: float | None = None,
) -> VoicingLabels:
    """High-pass the laryngograph signal (Kaiser beta=5, n=2400, fc by speaker
    sex: 25 Hz female / 15 Hz male) and track voicing on the filtered signal."""
    if cutoff_hz is None:
        if meta.sex == "unknown":
            raise InvalidArgument(
                f"speaker {meta.speaker_id}: sex unknown; pass an explicit cutoff_hz"
            )
        cutoff_hz = CUTOFF_HZ[meta.sex]
    if tracker_cfg is None:
        tracker_cfg = TrackerConfig()
    filt = design_kaiser_highpass(KAISER_BETA, KAISER_ORDER, cutoff_hz, laryn.sample_rate)
    filtered = apply_fir(laryn, filt)
    return track_voicing(filtered, tracker_cfg)


def pseudo_labels_from_mic(mic: Waveform, tracker_cfg: TrackerConfig | None = None) -> VoicingLabels:
    """Tracker labels straight off the microphone signal (no high-pass)."""
    return track_voicing(mic, tracker_cfg or TrackerConfig())


def mismatch_rate(a: VoicingLabels, b: VoicingLabels) -> LabelComparison:
    """Percent of frames where the two label sequences disagree.

    Lengths may differ by up to 2 frames (truncated to the overlap); anything
    larger needs explicit alignment first. Frames masked invalid in either
    sequence are excluded from the count.
    """
    if abs(len(a) - len(b)) > MAX_LENGTH_SLACK:
        raise InvalidArgument(
            f"length difference {abs(len(a) - len(b))} > {MAX_LENGTH_SLACK} frames; align first"
        )
    n = min(len(a), len(b))
    if n == 0:
        raise InvalidArgument("empty label sequences")
    valid = a.valid_mask[:n] & b.valid_mask[:n]
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise InvalidArgument("no valid frames to compare")
    diff = int(np.count_nonzero((a.labels[:n] != b.labels[:n]) & valid))
    return LabelComparison(100.0 * diff / n_valid, n_valid)


def align_for_lowest_vde(
    est: VoicingLabels, ref: VoicingLabels, max_shift: int = 5
) -> tuple[int, LabelComparison]:
    """Integer shift of est in [-max_shift, +max_shift] minimizing the mismatch.

    Positive shift moves est later relative to ref. Ties break to the smaller
    |shift|, then negative before positive.
    """
    if max_shift < 0:
        raise InvalidArgument("max_shift must be >= 0")
    best: tuple[int, LabelComparison] | None = None
    # tie-break order: 0, -1, +1, -2, +2, ...
    for s in sorted(range(-max_shift, max_shift + 1), key=lambda s: (abs(s), s > 0)):
        if s >= 0:
            e = est.labels[: len(est) - s] if s else est.labels
            r = ref.labels[s:]
            ev = est.valid_mask[: len(est) - s] if s else est.valid_mask
            rv = ref.valid_mask[s:]
        else:
            e = est.labels[-s:]
            r = ref.labels[: len(ref) + s]
            ev = est.valid_mask[-s:]
            rv = ref.valid_mask[: len(ref) + s]
        n = min(e.size, r.size)
        if n < 10:
            raise InvalidArgument(f"overlap at shift {s} is {n} frames, need >= 10")
        valid = ev[:n] & rv[:n]
        n_valid = int(valid.sum())
        if n_valid == 0:
            continue
        diff = int(np.count_nonzero((e[:n] != r[:n]) & valid))
        rate = 100.0 * diff / n_valid
        if best is None or rate < best[1].mismatch_rate:
            best = (s, LabelComparison(rate, n_valid, shift_applied=s))
    if best is None:
        raise InvalidArgument("no valid frames in any shift window")
    return best


def write_labels(path: str | Path, labels: VoicingLabels) -> None:
    """Write the canonical label file format (deterministic bytes)."""
    hop = labels.hop_ms
    hop_txt = str(int(hop)) if float(hop).is_integer() else repr(float(hop))
    lines = [f"#hop_ms={hop_txt}"]
    f0 = labels.f0 if labels.f0 is not None else np.zeros(len(labels))
    for i, (lab, f) in enumerate(zip(labels.labels, f0)):
        lines.append(f"{i}\t{int(lab)}\t{f:.3f}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_labels(path: str | Path) -> VoicingLabels:
    """Read the canonical label file format.

    The f0 column is kept only when it is consistent with the labels
    (f0 > 0 exactly on voiced frames); files written from decisions without
    pitch carry zeros there and read back with f0 absent.
    """
    text = Path(path).read_text()
    lines = [ln for ln in text.splitlines() if ln]
    if not lines or not lines[0].startswith("#hop_ms="):
        raise InvalidArgument(f"{path}: missing #hop_ms header")
    hop_ms = float(lines[0].split("=", 1)[1])
    labels = []
    f0 = []
    for ln in lines[1:]:
        parts = ln.split("\t")
        if len(parts) != 3:
            raise InvalidArgument(f"{path}: malformed line {ln!r}")
        labels.append(int(parts[1]))
        f0.append(float(parts[2]))
    labels = np.array(labels, dtype=np.int8)
    f0 = np.array(f0)
    if not np.array_equal(f0 > 0, labels == 1):
        f0 = None
    return VoicingLabels(labels, hop_ms=hop_ms, f0=f0)


def read_three_class_labels(path: str | Path, hop_ms: float = 10.0) -> VoicingLabels:
    """Adapter for provided references with an uncertain class.

    One value per line: 1 voiced, 0 unvoiced, -1 uncertain. Uncertain frames
    are kept in the sequence but masked out of comparisons.
    """
    raw = [int(ln) for ln in Path(path).read_text().split()]
    arr = np.array(raw, dtype=np.int8)
    valid = arr >= 0
    labels = np.where(valid, arr, 0).astype(np.int8)
    return VoicingLabels(labels, hop_ms=hop_ms, valid=valid)


LABEL_READERS = {
    "voicedet": read_labels,
    "three_class": read_three_class_labels,
}


def read_labels_as(path: str | Path, label_format: str = "voicedet") -> VoicingLabels:
    """Dispatch to a registered per-corpus label reader."""
    try:
        reader = LABEL_READERS[label_format]
    except KeyError:
        raise InvalidArgument(
            f"unknown label format {label_format!r}; known: {sorted(LABEL_READERS)}"
        ) from None
    return reader(path)
