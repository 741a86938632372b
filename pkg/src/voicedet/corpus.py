"""Corpus scanning, manifests, exclusion lists, segmentation, and fold plans.

Manifests serialize as a versioned TSV (one record per line) with a JSON
sidecar for per-corpus/per-speaker counts; exclusion lists are TSV; fold
plans are JSON. All formats carry an explicit version marker and round-trip
bit-exactly.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .dsp import InvalidArgument, Waveform
from .labels import SpeakerMeta

log = logging.getLogger(__name__)

CORPORA = ("PTDB-TUG", "Mocha-TIMIT", "FDA", "KEELE", "CMU-Arctic", "LibriSpeech", "synthetic")
LARYNGOGRAPH_CORPORA = frozenset(("PTDB-TUG", "Mocha-TIMIT", "FDA", "KEELE", "CMU-Arctic"))

EXCLUSION_REASONS = ("flawed_laryngograph", "harmonic_noise_uncorrectable", "other")

MANIFEST_MAGIC = "#v1 voicedet-manifest"
EXCLUSION_MAGIC = "#v1 voicedet-exclusions"


@dataclass(frozen=True)
class UtteranceRecord:
    utt_id: str
    corpus: str
    mic_path: str
    laryn_path: str | None = None
    speaker: SpeakerMeta = field(default_factory=lambda: SpeakerMeta("unknown"))
    provided_label_path: str | None = None
    label_format: str = "voicedet"
    flags: tuple[str, ...] = ()

    def __post_init__(self):
        if self.corpus not in CORPORA:
            raise InvalidArgument(f"unknown corpus tag {self.corpus!r}; known: {CORPORA}")

    @property
    def full_id(self) -> str:
        return f"{self.corpus}/{self.utt_id}"


@dataclass(frozen=True)
class Manifest:
    records: tuple[UtteranceRecord, ...]

    def __post_init__(self):
        ids = [r.full_id for r in self.records]
        if len(set(ids)) != len(ids):
            raise InvalidArgument("duplicate utterance ids in manifest")

    def __len__(self) -> int:
        return len(self.records)

    def by_id(self) -> dict[str, UtteranceRecord]:
        return {r.full_id: r for r in self.records}

    def stats(self) -> dict:
        per_corpus: dict[str, int] = {}
        per_speaker: dict[str, int] = {}
        for r in self.records:
            per_corpus[r.corpus] = per_corpus.get(r.corpus, 0) + 1
            key = f"{r.corpus}/{r.speaker.speaker_id}"
            per_speaker[key] = per_speaker.get(key, 0) + 1
        return {
            "version": 1,
            "n_records": len(self.records),
            "per_corpus": dict(sorted(per_corpus.items())),
            "per_speaker": dict(sorted(per_speaker.items())),
        }


@dataclass(frozen=True)
class ExclusionList:
    entries: tuple[tuple[str, str, str], ...] = ()  # (corpus, utt_id, reason)
    corrections: tuple[tuple[str, str, str], ...] = ()  # (corpus, utt_id, corrected_label_path)


@dataclass(frozen=True)
class FoldPlan:
    held_out_corpus: str
    train_ids: tuple[str, ...]
    val_ids: tuple[str, ...]
    test_ids: tuple[str, ...]

    def __post_init__(self):
        if set(self.train_ids) & set(self.val_ids):
            raise InvalidArgument("train and val overlap")


# ---------------------------------------------------------------------------
# Layout adapters
# ---------------------------------------------------------------------------

def _scan_paired_dirs(root: Path, corpus: str) -> list[UtteranceRecord]:
    """Layout: root/mic/<utt>.wav, optional root/laryn/<utt>.wav,
    optional root/labels/<utt>.lab, optional root/meta.tsv
    (lines: utt_id<TAB>speaker_id<TAB>sex)."""
    mic_dir = root / "mic"
    if not mic_dir.is_dir():
        raise InvalidArgument(f"adapter 'paired_dirs': missing {mic_dir}")
    meta: dict[str, SpeakerMeta] = {}
    meta_path = root / "meta.tsv"
    if meta_path.exists():
        for ln in meta_path.read_text().splitlines():
            if not ln.strip() or ln.startswith("#"):
                continue
            utt, spk, sex = ln.split("\t")
            meta[utt] = SpeakerMeta(spk, sex)
    records = []
    for wav in sorted(mic_dir.glob("*.wav")):
        utt = wav.stem
        laryn = root / "laryn" / f"{utt}.wav"
        label = root / "labels" / f"{utt}.lab"
        flags: tuple[str, ...] = ()
        if corpus in LARYNGOGRAPH_CORPORA or (root / "laryn").is_dir():
            if not laryn.exists():
                flags = ("incomplete",)
        records.append(
            UtteranceRecord(
                utt_id=utt,
                corpus=corpus,
                mic_path=str(wav),
                laryn_path=str(laryn) if laryn.exists() else None,
                speaker=meta.get(utt, SpeakerMeta("unknown")),
                provided_label_path=str(label) if label.exists() else None,
                flags=flags,
            )
        )
    return records


LAYOUT_ADAPTERS = {
    "paired_dirs": _scan_paired_dirs,
}


def scan_corpus(root: str | Path, corpus: str, adapter: str = "paired_dirs") -> Manifest:
    """Scan a corpus directory with a registered layout adapter."""
    root = Path(root)
    if not root.is_dir():
        raise InvalidArgument(f"corpus root {root} does not exist")
    try:
        scan = LAYOUT_ADAPTERS[adapter]
    except KeyError:
        raise InvalidArgument(
            f"unknown layout adapter {adapter!r}; known: {sorted(LAYOUT_ADAPTERS)}"
        ) from None
    records = scan(root, corpus)
    if not records:
        log.warning("scan of %s (%s) found no utterances", root, corpus)
    return Manifest(tuple(records))


# ---------------------------------------------------------------------------
# Exclusions and corrections
# ---------------------------------------------------------------------------

def apply_exclusions(manifest: Manifest, exclusions: ExclusionList) -> Manifest:
    """Drop excluded records and repoint corrected label paths. Idempotent."""
    excluded = {(c, u) for c, u, _ in exclusions.entries}
    corrected = {(c, u): p for c, u, p in exclusions.corrections}
    present = {(r.corpus, r.utt_id) for r in manifest.records}
    for key in excluded | set(corrected):
        if key not in present:
            log.warning("exclusion/correction entry %s matches no record", key)
    out = []
    n_removed = 0
    for r in manifest.records:
        key = (r.corpus, r.utt_id)
        if key in excluded:
            n_removed += 1
            continue
        if key in corrected:
            r = replace(r, provided_label_path=corrected[key])
        out.append(r)
    log.info("exclusions removed %d of %d records", n_removed, len(manifest))
    return Manifest(tuple(out))


def write_exclusions(path: str | Path, exclusions: ExclusionList) -> None:
    lines = [EXCLUSION_MAGIC]
    for corpus, utt, reason in exclusions.entries:
        lines.append(f"{corpus}\t{utt}\t{reason}")
    for corpus, utt, label_path in exclusions.corrections:
        lines.append(f"{corpus}\t{utt}\tcorrection\t{label_path}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_exclusions(path: str | Path) -> ExclusionList:
    lines = [ln for ln in Path(path).read_text().splitlines() if ln.strip()]
    if not lines or lines[0] != EXCLUSION_MAGIC:
        raise InvalidArgument(f"{path}: not a {EXCLUSION_MAGIC} file")
    entries = []
    corrections = []
    for ln in lines[1:]:
        parts = ln.split("\t")
        if len(parts) == 4 and parts[2] == "correction":
            corrections.append((parts[0], parts[1], parts[3]))
        elif len(parts) == 3:
            if parts[2] not in EXCLUSION_REASONS:
                raise InvalidArgument(f"{path}: unknown exclusion reason {parts[2]!r}")
            entries.append((parts[0], parts[1], parts[2]))
        else:
            raise InvalidArgument(f"{path}: malformed line {ln!r}")
    return ExclusionList(tuple(entries), tuple(corrections))


# ---------------------------------------------------------------------------
# Manifest serialization
# ---------------------------------------------------------------------------

def _opt(s: str | None) -> str:
    return s if s is not None else "-"


def _unopt(s: str) -> str | None:
    return None if s == "-" else s


def manifest_to_text(manifest: Manifest) -> str:
    lines = [MANIFEST_MAGIC]
    for r in manifest.records:
        lines.append(
            "\t".join(
                [
                    r.corpus,
                    r.utt_id,
                    r.mic_path,
                    _opt(r.laryn_path),
                    r.speaker.speaker_id,
                    r.speaker.sex,
                    _opt(r.provided_label_path),
                    r.label_format,
                    ",".join(r.flags) if r.flags else "-",
                ]
            )
        )
    return "\n".join(lines) + "\n"


def manifest_from_text(text: str) -> Manifest:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0] != MANIFEST_MAGIC:
        raise InvalidArgument(f"not a {MANIFEST_MAGIC} document")
    records = []
    for ln in lines[1:]:
        parts = ln.split("\t")
        if len(parts) != 9:
            raise InvalidArgument(f"malformed manifest line {ln!r}")
        corpus, utt, mic, laryn, spk, sex, label, fmt, flags = parts
        records.append(
            UtteranceRecord(
                utt_id=utt,
                corpus=corpus,
                mic_path=mic,
                laryn_path=_unopt(laryn),
                speaker=SpeakerMeta(spk, sex),
                provided_label_path=_unopt(label),
                label_format=fmt,
                flags=tuple(flags.split(",")) if flags != "-" else (),
            )
        )
    return Manifest(tuple(records))


def write_manifest(path: str | Path, manifest: Manifest) -> None:
    """Write <path> (TSV) and <path>.stats.json (counts sidecar)."""
    path = Path(path)
    path.write_text(manifest_to_text(manifest))
    sidecar = path.with_suffix(path.suffix + ".stats.json")
    sidecar.write_text(json.dumps(manifest.stats(), indent=2, sort_keys=True) + "\n")


def read_manifest(path: str | Path) -> Manifest:
    return manifest_from_text(Path(path).read_text())


# ---------------------------------------------------------------------------
# Segmentation and folds
# ---------------------------------------------------------------------------

def segment_recording(wave: Waveform, target_sec: float = 3.0) -> list[Waveform]:
    """Cut a long recording into contiguous ~target_sec segments.

    A final remainder shorter than 1 s is merged into the previous segment;
    an input shorter than 1 s comes back as a single (warned) segment.
    """
    if target_sec <= 0:
        raise InvalidArgument("target_sec must be positive")
    sr = wave.sample_rate
    seg_len = int(round(target_sec * sr))
    min_len = sr  # 1 second
    n = len(wave)
    if n <= seg_len:
        if n < min_len:
            log.warning("recording of %.2f s is shorter than 1 s", n / sr)
        return [wave]
    bounds = list(range(0, n, seg_len))
    if n - bounds[-1] < min_len:
        bounds.pop()
    bounds.append(n)
    return [Waveform(wave.samples[a:b], sr) for a, b in zip(bounds[:-1], bounds[1:])]


def make_locro_folds(
    manifests: dict[str, Manifest],
    seed: int,
    val_fraction: float = 0.1,
    speaker_disjoint: bool = False,
) -> list[FoldPlan]:
    """One leave-one-corpus-out fold per corpus, with a seeded 90/10
    train/val split (by utterance, or by speaker with speaker_disjoint)."""
    if len(manifests) < 2:
        raise InvalidArgument("need at least 2 corpora for leave-one-corpus-out")
    for name, m in manifests.items():
        if len(m) == 0:
            raise InvalidArgument(f"corpus {name} has no records")
    folds = []
    for fold_idx, held_out in enumerate(sorted(manifests)):
        rng = np.random.default_rng([seed, fold_idx])
        test_ids = tuple(r.full_id for r in manifests[held_out].records)
        pool = [r for name in sorted(manifests) if name != held_out for r in manifests[name].records]
        if speaker_disjoint:
            speakers = sorted({f"{r.corpus}/{r.speaker.speaker_id}" for r in pool})
            order = list(rng.permutation(len(speakers)))
            val_speakers: set[str] = set()
            n_val_target = round(val_fraction * len(pool))
            count = 0
            for i in order:
                if count >= n_val_target:
                    break
                val_speakers.add(speakers[i])
                count += sum(
                    1 for r in pool if f"{r.corpus}/{r.speaker.speaker_id}" == speakers[i]
                )
            val = [r.full_id for r in pool if f"{r.corpus}/{r.speaker.speaker_id}" in val_speakers]
            train = [r.full_id for r in pool if f"{r.corpus}/{r.speaker.speaker_id}" not in val_speakers]
        else:
            order = rng.permutation(len(pool))
            n_val = max(1, round(val_fraction * len(pool))) if len(pool) > 1 else 0
            val = [pool[i].full_id for i in order[:n_val]]
            train = [pool[i].full_id for i in order[n_val:]]
        folds.append(
            FoldPlan(
                held_out_corpus=held_out,
                train_ids=tuple(train),
                val_ids=tuple(val),
                test_ids=test_ids,
            )
        )
    return folds


def folds_to_json(folds: list[FoldPlan]) -> str:
    payload = {
        "version": 1,
        "folds": [
            {
                "held_out_corpus": f.held_out_corpus,
                "train_ids": list(f.train_ids),
                "val_ids": list(f.val_ids),
                "test_ids": list(f.test_ids),
            }
            for f in folds
        ],
    }
    return json.dumps(payload, indent=2) + "\n"


def folds_from_json(text: str) -> list[FoldPlan]:
    payload = json.loads(text)
    if payload.get("version") != 1:
        raise InvalidArgument("unsupported fold plan version")
    return [
        FoldPlan(
            held_out_corpus=f["held_out_corpus"],
            train_ids=tuple(f["train_ids"]),
            val_ids=tuple(f["val_ids"]),
            test_ids=tuple(f["test_ids"]),
        )
        for f in payload["folds"]
    ]
