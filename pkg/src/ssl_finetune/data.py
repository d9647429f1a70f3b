"""Manifests, split protocols and the synthetic toy corpora."""

from __future__ import annotations

import itertools
import json
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.io import wavfile

from .errors import DataError
from .heads import SemanticAnnotation

DATA_ROOT_ENV = "SSL_FINETUNE_DATA_ROOT"
SAMPLE_RATE = 16000

# IEMOCAP 4-class setup
IEMOCAP_CLASSES = ("neu", "hap", "ang", "sad")


@dataclass(frozen=True)
class ManifestEntry:
    utt_id: str
    audio: str
    duration: float
    speaker: str
    emotion: str | None = None
    semantics: SemanticAnnotation | None = None
    split: str | None = None

    def to_json(self) -> str:
        d = {"id": self.utt_id, "audio": self.audio, "duration": self.duration, "speaker": self.speaker}
        if self.emotion is not None:
            d["emotion"] = self.emotion
        if self.semantics is not None:
            d["semantics"] = self.semantics.to_dict()
        if self.split is not None:
            d["split"] = self.split
        return json.dumps(d, sort_keys=True, ensure_ascii=False)

    @classmethod
    def from_json(cls, line: str) -> "ManifestEntry":
        d = json.loads(line)
        sem = d.get("semantics")
        return cls(
            utt_id=d["id"],
            audio=d["audio"],
            duration=float(d["duration"]),
            speaker=str(d["speaker"]),
            emotion=d.get("emotion"),
            semantics=SemanticAnnotation.from_dict(sem) if sem is not None else None,
            split=d.get("split"),
        )


def resolve_data_root(root: str | os.PathLike | None = None, default: str | os.PathLike | None = None) -> Path:
    """Explicit ``root`` > ``$SSL_FINETUNE_DATA_ROOT`` > ``default`` > cwd."""
    if root is not None:
        return Path(root)
    env = os.environ.get(DATA_ROOT_ENV)
    if env:
        return Path(env)
    return Path(default) if default is not None else Path.cwd()


@dataclass
class Manifest:
    entries: list[ManifestEntry]
    root: Path = field(default_factory=Path.cwd)
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        ids = [e.utt_id for e in self.entries]
        if len(set(ids)) != len(ids):
            dup = next(i for i in ids if ids.count(i) > 1)
            raise DataError(f"duplicate utterance id {dup!r}")

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    @property
    def ids(self) -> list[str]:
        return [e.utt_id for e in self.entries]

    def by_id(self) -> dict[str, ManifestEntry]:
        return {e.utt_id: e for e in self.entries}

    @property
    def speakers(self) -> list[str]:
        return sorted({e.speaker for e in self.entries})

    def subset(self, ids: Iterable[str]) -> "Manifest":
        keep = set(ids)
        return Manifest([e for e in self.entries if e.utt_id in keep], self.root, self._cache)

    def validate(self, task: str | None = None) -> None:
        for e in self.entries:
            if not (self.root / e.audio).exists() and e.utt_id not in self._cache:
                raise DataError(f"audio for {e.utt_id} not found: {self.root / e.audio}")
            if task == "emotion" and e.emotion is None:
                raise DataError(f"{e.utt_id} has no emotion label")
            if task == "semantics" and e.semantics is None:
                raise DataError(f"{e.utt_id} has no semantic annotation")

    def waveform(self, entry: ManifestEntry | str) -> np.ndarray:
        e = self.by_id()[entry] if isinstance(entry, str) else entry
        if e.utt_id not in self._cache:
            self._cache[e.utt_id] = read_wav(self.root / e.audio)
        return self._cache[e.utt_id]

    def save(self, path: str | os.PathLike) -> None:
        with open(path, "w", encoding="utf-8") as f:
            for e in self.entries:
                f.write(e.to_json() + "\n")

    @classmethod
    def load(cls, path: str | os.PathLike, root: str | os.PathLike | None = None) -> "Manifest":
        path = Path(path)
        if not path.exists():
            raise DataError(f"manifest not found: {path}")
        with open(path, encoding="utf-8") as f:
            entries = [ManifestEntry.from_json(l) for l in f if l.strip()]
        return cls(entries, resolve_data_root(root, default=path.parent))


def write_wav(path: str | os.PathLike, samples: np.ndarray, sample_rate: int = SAMPLE_RATE) -> None:
    pcm = np.clip(np.round(np.asarray(samples) * 32767.0), -32768, 32767).astype("<i2")
    wavfile.write(path, sample_rate, pcm)


def read_wav(path: str | os.PathLike, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    sr, data = wavfile.read(path)
    if sr != sample_rate:
        raise DataError(f"{path}: sample rate {sr}, expected {sample_rate}")
    if data.ndim != 1:
        raise DataError(f"{path}: expected mono audio")
    if data.dtype == np.int16:
        return data.astype(np.float32) / 32767.0
    return data.astype(np.float32)


# ---------------------------------------------------------------------------
# split protocols


@dataclass(frozen=True)
class SplitPlan:
    fold_id: int
    train: frozenset
    validation: frozenset
    test: frozenset
    seed: int | None = None

    def __post_init__(self):
        for name in ("train", "validation", "test"):
            object.__setattr__(self, name, frozenset(getattr(self, name)))
        if self.train & self.validation or self.train & self.test or self.validation & self.test:
            raise DataError(f"fold {self.fold_id}: train/validation/test overlap")

    @property
    def all_ids(self) -> frozenset:
        return self.train | self.validation | self.test


def _split_sizes(n: int, ratios: Sequence[float]) -> tuple[int, int, int]:
    n_val = max(1, int(round(n * ratios[1])))
    n_test = max(1, int(round(n * ratios[2]))) if ratios[2] > 0 else 0
    n_train = n - n_val - n_test
    if n_train < 1:
        raise DataError(f"{n} utterances are too few for a train/validation/test split")
    return n_train, n_val, n_test


def make_sd_splits(manifest: Manifest, seeds: Sequence[int] = (0, 1, 2, 3, 4),
                   ratios: Sequence[float] = (0.8, 0.1, 0.1)) -> list[SplitPlan]:
    """Speaker-dependent random utterance splits, one per seed."""
    ids = sorted(manifest.ids)
    if len(ids) < 3:
        raise DataError("speaker-dependent splits need at least 3 utterances")
    n_train, n_val, _ = _split_sizes(len(ids), ratios)
    plans = []
    for fold, seed in enumerate(seeds):
        perm = [ids[i] for i in np.random.default_rng(seed).permutation(len(ids))]
        plans.append(SplitPlan(fold, perm[:n_train], perm[n_train : n_train + n_val],
                               perm[n_train + n_val :], seed))
    return plans


def make_si_folds(manifest: Manifest) -> list[SplitPlan]:
    """Leave-two-speakers-out folds: fold i tests speaker i, validates on speaker i+1."""
    speakers = manifest.speakers
    N = len(speakers)
    if N < 3:
        raise DataError(f"speaker-independent folds need at least 3 speakers, got {N}")
    by_spk = {s: [e.utt_id for e in manifest if e.speaker == s] for s in speakers}
    plans = []
    for i, test_spk in enumerate(speakers):
        val_spk = speakers[(i + 1) % N]
        train = [u for s in speakers if s not in (test_spk, val_spk) for u in by_spk[s]]
        plans.append(SplitPlan(i, train, by_spk[val_spk], by_spk[test_spk]))
    return plans


def make_slu_splits(manifest: Manifest) -> SplitPlan:
    """The corpus' own train/validation/test assignment (``split`` field)."""
    sets = {"train": [], "validation": [], "test": []}
    aliases = {"train": "train", "dev": "validation", "devel": "validation", "valid": "validation",
               "validation": "validation", "test": "test"}
    for e in manifest:
        if e.split not in aliases:
            raise DataError(f"{e.utt_id}: unknown or missing split {e.split!r}")
        sets[aliases[e.split]].append(e.utt_id)
    return SplitPlan(0, sets["train"], sets["validation"], sets["test"])


@dataclass(frozen=True)
class Trial:
    enroll_id: str
    test_id: str
    label: str


@dataclass
class SVProtocol:
    trials: list[Trial]
    held_out_speakers: list[str]
    id_speakers: list[str]
    plans: list[SplitPlan]


def make_sv_trials(manifest: Manifest, held_out_speakers: int = 4, trials_per_speaker: int = 10,
                   seed: int = 0, plan_seeds: Sequence[int] = (0, 1, 2, 3, 4),
                   val_fraction: float = 0.1) -> SVProtocol:
    """Verification trials among held-out speakers plus identification splits.

    Each held-out speaker contributes up to ``trials_per_speaker`` target
    trials and the same number of nontarget trials against other held-out
    speakers. Identification train/validation plans cover the remaining
    speakers only.
    """
    speakers = manifest.speakers
    if held_out_speakers < 2:
        raise DataError("need at least 2 held-out speakers to form nontarget trials")
    if held_out_speakers >= len(speakers):
        raise DataError(f"{held_out_speakers} held-out speakers leave no identification speakers")
    rng = np.random.default_rng(seed)
    held = sorted(rng.choice(speakers, size=held_out_speakers, replace=False).tolist())
    id_spk = [s for s in speakers if s not in held]
    by_spk = {s: sorted(e.utt_id for e in manifest if e.speaker == s) for s in speakers}
    for s in held:
        if len(by_spk[s]) < 2:
            raise DataError(f"held-out speaker {s} has fewer than 2 utterances; no target trials possible")

    trials = []
    for s in held:
        pairs = list(itertools.combinations(by_spk[s], 2))
        n = min(trials_per_speaker, len(pairs))
        for i in sorted(rng.choice(len(pairs), size=n, replace=False)):
            trials.append(Trial(*pairs[i], "target"))
        others = [(a, b) for a in by_spk[s] for o in held if o != s for b in by_spk[o]]
        for i in sorted(rng.choice(len(others), size=min(n, len(others)), replace=False)):
            trials.append(Trial(*others[i], "nontarget"))

    id_utts = sorted(u for s in id_spk for u in by_spk[s])
    plans = []
    for fold, ps in enumerate(plan_seeds):
        perm = [id_utts[i] for i in np.random.default_rng(ps).permutation(len(id_utts))]
        n_val = max(1, int(round(len(perm) * val_fraction)))
        plans.append(SplitPlan(fold, perm[n_val:], perm[:n_val], (), ps))
    return SVProtocol(trials, held, id_spk, plans)


def write_trials(path: str | os.PathLike, trials: Iterable[Trial]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for t in trials:
            f.write(f"{t.enroll_id} {t.test_id} {t.label}\n")


def read_trials(path: str | os.PathLike) -> list[Trial]:
    out = []
    with open(path, encoding="utf-8") as f:
        for n, line in enumerate(f, 1):
            fields = line.split()
            if not fields:
                continue
            if len(fields) != 3 or fields[2] not in ("target", "nontarget"):
                raise DataError(f"{path}:{n}: expected 'enroll_id test_id target|nontarget'")
            out.append(Trial(*fields))
    return out


# ---------------------------------------------------------------------------
# toy corpora


@dataclass(frozen=True)
class ToyCorpusSpec:
    """Parameters of a synthetic corpus.

    ``task="classification"``: every (speaker, class) cell gets
    ``utterances_per_cell`` utterances. ``task="slu"``: utterances are
    rendered from the built-in command grammar, ``utterances_per_cell`` per
    speaker.
    """

    task: str = "classification"
    num_speakers: int = 4
    num_classes: int = 4
    utterances_per_cell: int = 5
    duration_range: tuple[float, float] = (0.3, 0.5)
    noise: float = 0.05
    sample_rate: int = SAMPLE_RATE
    seed: int = 0

    def __post_init__(self):
        if self.task not in ("classification", "slu"):
            raise DataError(f"unknown toy task {self.task!r}")
        if min(self.num_speakers, self.num_classes, self.utterances_per_cell) < 1:
            raise DataError("toy corpus counts must be positive")
        lo, hi = self.duration_range
        if not 0 < lo <= hi:
            raise DataError("duration_range must satisfy 0 < lo <= hi")


# resonance centre per class (Hz); classes beyond the table interpolate
_FORMANTS = (500.0, 1100.0, 1900.0, 3000.0, 800.0, 1500.0, 2500.0, 3600.0)


def _class_resonance(c: int) -> float:
    return _FORMANTS[c % len(_FORMANTS)] + 150.0 * (c // len(_FORMANTS))


def speaker_f0(s: int, num_speakers: int) -> float:
    return 100.0 + 160.0 * s / max(num_speakers - 1, 1)


def _harmonic_tone(t, f0, resonance, sr, bandwidth=350.0):
    out = np.zeros_like(t)
    for h in range(1, int((sr / 2 - 200) // f0) + 1):
        f = h * f0
        amp = np.exp(-(((f - resonance) / bandwidth) ** 2)) + 0.15 / h
        out += amp * np.sin(2 * np.pi * f * t)
    return out


def synth_class_utterance(speaker: int, cls: int, num_speakers: int, duration: float, rng,
                          noise: float = 0.05, sr: int = SAMPLE_RATE) -> np.ndarray:
    """Speaker sets the pitch band; class sets resonance and modulation rate."""
    n = int(round(duration * sr))
    t = np.arange(n) / sr
    f0 = speaker_f0(speaker, num_speakers) * (1.0 + rng.uniform(-0.03, 0.03))
    x = _harmonic_tone(t, f0, _class_resonance(cls), sr)
    am_rate = 4.0 + 5.0 * cls
    x *= 0.6 + 0.4 * np.sin(2 * np.pi * am_rate * t + rng.uniform(0, 2 * np.pi))
    x /= np.abs(x).max() + 1e-9
    x = 0.5 * x + noise * rng.standard_normal(n)
    return (x / max(1.0, np.abs(x).max())).astype(np.float32)


# scenario, action, [(slot_type, values)]
SLU_GRAMMAR = (
    ("alarm", "set", [("time", ("7am", "9pm", "noon"))]),
    ("alarm", "remove", []),
    ("weather", "query", [("place_name", ("paris", "rome", "tokyo"))]),
    ("weather", "query", [("date", ("today", "tomorrow"))]),
    ("music", "play", [("artist", ("adele", "queen"))]),
    ("iot", "lights_on", [("house_place", ("kitchen", "bedroom"))]),
    ("iot", "lights_off", []),
    ("calendar", "query", [("date", ("today", "tomorrow"))]),
)


def slu_symbols() -> list[str]:
    syms = []
    for sc, ac, slots in SLU_GRAMMAR:
        for w in (sc, ac, *[t for t, _ in slots], *[v for _, vs in slots for v in vs]):
            if w not in syms:
                syms.append(w)
    return syms


def synth_slu_utterance(ann: SemanticAnnotation, speaker: int, num_speakers: int, rng,
                        noise: float = 0.05, sr: int = SAMPLE_RATE, word_dur: float = 0.08,
                        gap: float = 0.02) -> np.ndarray:
    """One chord-like 'word' per symbol: scenario, action, then type/value per entity."""
    syms = slu_symbols()
    words = [ann.scenario, ann.action]
    for t, v in sorted(ann.entities):
        words += [t, v]
    pitch = 0.85 + 0.3 * speaker / max(num_speakers - 1, 1)
    chunks = [np.zeros(int(gap * sr))]
    for w in words:
        i = syms.index(w)
        n = int(round(word_dur * sr * rng.uniform(0.9, 1.1)))
        t = np.arange(n) / sr
        f1 = (250.0 + 110.0 * (i % 6)) * pitch
        f2 = (1200.0 + 260.0 * (i // 6)) * pitch
        env = np.sin(np.pi * np.arange(n) / n)
        chunks.append(env * (np.sin(2 * np.pi * f1 * t) + 0.7 * np.sin(2 * np.pi * f2 * t)))
        chunks.append(np.zeros(int(gap * sr)))
    x = np.concatenate(chunks)
    x = 0.45 * x / (np.abs(x).max() + 1e-9) + noise * rng.standard_normal(len(x))
    return (x / max(1.0, np.abs(x).max())).astype(np.float32)


def sample_annotation(rng) -> SemanticAnnotation:
    sc, ac, slots = SLU_GRAMMAR[rng.integers(len(SLU_GRAMMAR))]
    ents = frozenset((t, vs[rng.integers(len(vs))]) for t, vs in slots)
    return SemanticAnnotation(sc, ac, ents)


def generate_toy_waveforms(spec: ToyCorpusSpec) -> tuple[list[ManifestEntry], dict[str, np.ndarray]]:
    """In-memory corpus: manifest entries plus waveforms keyed by utterance id."""
    rng = np.random.default_rng(spec.seed)
    entries, waves = [], {}
    lo, hi = spec.duration_range
    if spec.task == "classification":
        for s in range(spec.num_speakers):
            for c in range(spec.num_classes):
                for u in range(spec.utterances_per_cell):
                    uid = f"spk{s:02d}_c{c:02d}_u{u:03d}"
                    x = synth_class_utterance(s, c, spec.num_speakers, rng.uniform(lo, hi), rng, spec.noise,
                                              spec.sample_rate)
                    waves[uid] = x
                    entries.append(ManifestEntry(uid, f"wav/{uid}.wav", len(x) / spec.sample_rate,
                                                 f"spk{s:02d}", emotion=f"c{c}"))
    else:
        n = 0
        for s in range(spec.num_speakers):
            for u in range(spec.utterances_per_cell):
                ann = sample_annotation(rng)
                uid = f"spk{s:02d}_slu{u:03d}"
                x = synth_slu_utterance(ann, s, spec.num_speakers, rng, spec.noise, spec.sample_rate)
                r = rng.random()
                split = "train" if r < 0.8 else ("validation" if r < 0.9 else "test")
                waves[uid] = x
                entries.append(ManifestEntry(uid, f"wav/{uid}.wav", len(x) / spec.sample_rate,
                                             f"spk{s:02d}", semantics=ann, split=split))
                n += 1
    return entries, waves


def generate_toy_corpus(spec: ToyCorpusSpec, out_dir: str | os.PathLike | None = None) -> Manifest:
    """Generate a toy corpus; written as WAV files + ``manifest.jsonl`` when ``out_dir`` is set."""
    entries, waves = generate_toy_waveforms(spec)
    if out_dir is None:
        return Manifest(entries, Path.cwd(), dict(waves))
    out = Path(out_dir)
    (out / "wav").mkdir(parents=True, exist_ok=True)
    for e in entries:
        write_wav(out / e.audio, waves[e.utt_id], spec.sample_rate)
    manifest = Manifest(entries, out)
    manifest.save(out / "manifest.jsonl")
    return manifest
