"""Data model, manifest I/O, normalization and the synthetic corpus generator."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, DegenerateCorpusError, ManifestError, ValidationError
from .wavio import SAMPLE_RATE, read_wav, to_pcm16, write_wav

UTTERANCE_SPLITS = ("train", "dev", "test")
NOISE_SPLITS = ("adapt", "test")
ATTRIBUTES = ("arousal", "dominance", "valence")

ADAPT_ENVIRONMENTS = (
    "mall", "restaurant", "office", "airport", "station", "city", "park", "street",
    "traffic", "home", "kitchen", "living room", "bathroom", "bedroom", "metro",
    "bus", "car", "construction site", "pedestrian", "beach",
)
TEST_ENVIRONMENTS = ("plaza", "garden", "school", "tram", "sea", "boat")

# "vehicle" also covers transit settings (station, metro); see README.
DEFAULT_GROUPS = {
    "mall": "indoor", "restaurant": "indoor", "office": "indoor", "airport": "indoor",
    "home": "indoor", "kitchen": "indoor", "living room": "indoor", "bathroom": "indoor",
    "bedroom": "indoor", "school": "indoor",
    "city": "outdoor", "park": "outdoor", "street": "outdoor", "traffic": "outdoor",
    "construction site": "outdoor", "pedestrian": "outdoor", "beach": "outdoor",
    "plaza": "outdoor", "garden": "outdoor", "sea": "outdoor",
    "station": "vehicle", "metro": "vehicle", "bus": "vehicle", "car": "vehicle",
    "tram": "vehicle", "boat": "vehicle",
}
GROUPS = ("indoor", "outdoor", "vehicle")


@dataclass(frozen=True)
class LabelTriple:
    arousal: float
    dominance: float
    valence: float

    def as_array(self) -> np.ndarray:
        return np.array([self.arousal, self.dominance, self.valence], dtype=np.float64)

    @classmethod
    def from_array(cls, values: Sequence[float]) -> "LabelTriple":
        a, d, v = (float(x) for x in values)
        return cls(a, d, v)


@dataclass
class Utterance:
    id: str
    samples: np.ndarray
    labels_raw: LabelTriple
    split: str

    def __post_init__(self):
        if self.split not in UTTERANCE_SPLITS:
            raise ValidationError(f"utterance {self.id}: unknown split {self.split!r}")
        self.samples = np.asarray(self.samples, dtype=np.float32)
        if not np.all(np.isfinite(self.samples)):
            raise ValidationError(f"utterance {self.id}: non-finite samples")
        for name in ATTRIBUTES:
            x = getattr(self.labels_raw, name)
            if not 1.0 <= x <= 7.0:
                raise ValidationError(f"utterance {self.id}: {name}={x} outside [1, 7]")

    @property
    def labels(self) -> LabelTriple:
        return normalize_labels(self.labels_raw)


@dataclass
class NoiseClip:
    id: str
    environment: str
    samples: np.ndarray
    split: str

    def __post_init__(self):
        if self.split not in NOISE_SPLITS:
            raise ValidationError(f"noise {self.id}: unknown split {self.split!r}")
        self.samples = np.asarray(self.samples, dtype=np.float32)


@dataclass
class EnvironmentCatalog:
    adapt_environments: list[str] = field(default_factory=lambda: list(ADAPT_ENVIRONMENTS))
    test_environments: list[str] = field(default_factory=lambda: list(TEST_ENVIRONMENTS))
    group_of: dict[str, str] = field(default_factory=lambda: dict(DEFAULT_GROUPS))

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if len(self.adapt_environments) != 20:
            raise ValidationError(f"catalog needs 20 adapt environments, got {len(self.adapt_environments)}")
        if len(self.test_environments) != 6:
            raise ValidationError(f"catalog needs 6 test environments, got {len(self.test_environments)}")
        if len(set(self.adapt_environments)) != 20 or len(set(self.test_environments)) != 6:
            raise ValidationError("duplicate environment names in catalog")
        overlap = set(self.adapt_environments) & set(self.test_environments)
        if overlap:
            raise ValidationError(f"adapt and test environments overlap: {sorted(overlap)}")
        missing = [e for e in self.all_environments if e not in self.group_of]
        if missing:
            raise ValidationError(f"environments without a group: {missing}")

    @property
    def all_environments(self) -> list[str]:
        return list(self.adapt_environments) + list(self.test_environments)

    def index_of(self, environment: str) -> int:
        """Index among the adapt environments (the DAT / one-hot label space)."""
        return self.adapt_environments.index(environment)

    def to_json(self) -> dict:
        return {
            "adapt": list(self.adapt_environments),
            "test": list(self.test_environments),
            "groups": dict(self.group_of),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "EnvironmentCatalog":
        return cls(list(obj["adapt"]), list(obj["test"]), dict(obj["groups"]))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "EnvironmentCatalog":
        return cls.from_json(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class WaveformStats:
    mean: float
    std: float

    def __post_init__(self):
        if not self.std > 0:
            raise DegenerateCorpusError(f"waveform std must be positive, got {self.std}")


# ---------------------------------------------------------------------------
# normalization


def normalize_labels(raw: LabelTriple) -> LabelTriple:
    """Min-max map each attribute from the 1..7 rating scale onto [0, 1]."""
    out = []
    for name in ATTRIBUTES:
        x = float(getattr(raw, name))
        if not 1.0 <= x <= 7.0:
            raise ValidationError(f"{name}={x} outside [1, 7]")
        out.append((x - 1.0) / 6.0)
    return LabelTriple(*out)


def denormalize_labels(norm: LabelTriple) -> LabelTriple:
    return LabelTriple(*(x * 6.0 + 1.0 for x in norm.as_array()))


def compute_stats(train_utterances: Iterable[Utterance]) -> WaveformStats:
    """Pooled mean and population std over every sample of the training split."""
    total = 0
    s1 = 0.0
    s2 = 0.0
    for utt in train_utterances:
        x = np.asarray(utt.samples, dtype=np.float64)
        total += x.size
        s1 += float(x.sum())
    if total == 0:
        raise DegenerateCorpusError("cannot compute waveform stats on an empty training split")
    mean = s1 / total
    for utt in train_utterances:
        x = np.asarray(utt.samples, dtype=np.float64)
        s2 += float(np.sum((x - mean) ** 2))
    std = float(np.sqrt(s2 / total))
    if std == 0.0:
        raise DegenerateCorpusError("training waveforms have zero variance")
    return WaveformStats(mean, std)


def z_normalize(samples, stats: WaveformStats) -> np.ndarray:
    if not stats.std > 0:
        raise DegenerateCorpusError("z-normalization with zero std")
    return ((np.asarray(samples, dtype=np.float64) - stats.mean) / stats.std).astype(np.float32)


# ---------------------------------------------------------------------------
# manifests


@dataclass
class UtteranceRecord:
    id: str
    wav: Path
    labels_raw: LabelTriple
    split: str

    def load(self) -> Utterance:
        return Utterance(self.id, read_wav(self.wav), self.labels_raw, self.split)

    def to_json(self, root: Path | None = None) -> dict:
        wav = self.wav.relative_to(root) if root else self.wav
        return {"id": self.id, "wav": wav.as_posix(), "arousal": self.labels_raw.arousal,
                "dominance": self.labels_raw.dominance, "valence": self.labels_raw.valence,
                "split": self.split}


@dataclass
class NoiseRecord:
    id: str
    wav: Path
    environment: str
    split: str

    def load(self) -> NoiseClip:
        return NoiseClip(self.id, self.environment, read_wav(self.wav), self.split)

    def to_json(self, root: Path | None = None) -> dict:
        wav = self.wav.relative_to(root) if root else self.wav
        return {"id": self.id, "wav": wav.as_posix(), "environment": self.environment,
                "split": self.split}


_UTT_FIELDS = ("id", "wav", "arousal", "dominance", "valence", "split")
_NOISE_FIELDS = ("id", "wav", "environment", "split")


def load_manifest(path: str | Path) -> list[UtteranceRecord | NoiseRecord]:
    """Parse a JSONL manifest. WAV paths resolve relative to the manifest directory."""
    path = Path(path)
    root = path.parent
    records: list[UtteranceRecord | NoiseRecord] = []
    with path.open() as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(path, lineno, f"malformed JSON ({exc.msg})") from exc
            if not isinstance(obj, dict):
                raise ManifestError(path, lineno, "record is not a JSON object")
            fields = _NOISE_FIELDS if "environment" in obj else _UTT_FIELDS
            for name in fields:
                if name not in obj:
                    raise ManifestError(path, lineno, f"missing field {name!r}")
            wav = root / obj["wav"]
            if "environment" in obj:
                if obj["split"] not in NOISE_SPLITS:
                    raise ValidationError(f"{path}:{lineno}: unknown noise split {obj['split']!r}")
                records.append(NoiseRecord(str(obj["id"]), wav, str(obj["environment"]), obj["split"]))
            else:
                if obj["split"] not in UTTERANCE_SPLITS:
                    raise ValidationError(f"{path}:{lineno}: unknown split {obj['split']!r}")
                labels = LabelTriple(float(obj["arousal"]), float(obj["dominance"]), float(obj["valence"]))
                records.append(UtteranceRecord(str(obj["id"]), wav, labels, obj["split"]))
    return records


def write_manifest(path: str | Path, records: Iterable[UtteranceRecord | NoiseRecord]) -> None:
    path = Path(path)
    with path.open("w") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_json(path.parent), sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# synthetic corpus


@dataclass
class SynthConfig:
    n_train: int = 2000
    n_dev: int = 300
    n_test: int = 200
    duration: tuple[float, float] = (0.4, 0.6)
    noise_clips_per_env: int = 4
    noise_duration: float = 2.0

    def validate(self) -> None:
        for name in ("n_train", "n_dev", "n_test", "noise_clips_per_env"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        lo, hi = self.duration
        if not 0 < lo <= hi:
            raise ConfigError(f"bad duration range {self.duration}")
        if self.noise_duration <= 0:
            raise ConfigError("noise_duration must be positive")

    @classmethod
    def from_json(cls, obj: dict) -> "SynthConfig":
        obj = dict(obj)
        if "duration" in obj:
            obj["duration"] = tuple(obj["duration"])
        return cls(**obj)


@dataclass
class Corpus:
    utterances: list[Utterance]
    noises: list[NoiseClip]
    catalog: EnvironmentCatalog

    def split(self, name: str) -> list[Utterance]:
        return [u for u in self.utterances if u.split == name]

    def noise_split(self, name: str) -> list[NoiseClip]:
        return [n for n in self.noises if n.split == name]

    def noise_by_environment(self, split: str = "adapt") -> dict[str, list[NoiseClip]]:
        out: dict[str, list[NoiseClip]] = {}
        for n in self.noises:
            if n.split == split:
                out.setdefault(n.environment, []).append(n)
        return out


def stable_seed(*keys) -> int:
    """64-bit seed from arbitrary keys; independent of call order and of PYTHONHASHSEED."""
    digest = hashlib.sha256(repr(keys).encode()).digest()
    return int.from_bytes(digest[:8], "little")


def _quantize(x: np.ndarray) -> np.ndarray:
    # keep in-memory audio identical to what a PCM16 round trip yields
    return (to_pcm16(x).astype(np.float32) / 32768.0)


# Group band centres (Hz) for the synthetic environment noise.
_GROUP_CENTRE = {"indoor": 450.0, "outdoor": 2400.0, "vehicle": 110.0}


def synth_utterance(uid: str, split: str, labels_raw: LabelTriple, n_samples: int,
                    rng: np.random.Generator) -> Utterance:
    """Harmonic complex: f0 follows dominance, level follows arousal, tilt follows valence."""
    a, d, v = normalize_labels(labels_raw).as_array()
    sr = SAMPLE_RATE
    t = np.arange(n_samples) / sr
    f0 = 90.0 * 2.0 ** (1.6 * d) * (1.0 + 0.03 * rng.standard_normal())
    contour = 1.0 + 0.06 * np.sin(2 * np.pi * rng.uniform(0.5, 1.5) * t + rng.uniform(0, 2 * np.pi))
    phase = 2 * np.pi * np.cumsum(f0 * contour) / sr
    tilt = 2.4 - 1.8 * v + 0.1 * rng.standard_normal()
    n_harm = int(min(40, 4000.0 / (f0 * 1.1)))
    wave = np.zeros(n_samples)
    for k in range(1, n_harm + 1):
        wave += k ** (-tilt) * np.sin(k * phase + rng.uniform(0, 2 * np.pi))
    syll = 0.5 * (1 - np.cos(2 * np.pi * rng.uniform(3.0, 5.0) * t + rng.uniform(0, 2 * np.pi)))
    wave *= 0.35 + 0.65 * syll
    ramp = min(160, n_samples // 4)
    if ramp:
        fade = np.linspace(0.0, 1.0, ramp)
        wave[:ramp] *= fade
        wave[-ramp:] *= fade[::-1]
    level_db = -32.0 + 22.0 * a + 0.8 * rng.standard_normal()
    wave *= 10 ** (level_db / 20) / np.sqrt(np.mean(wave ** 2))
    return Utterance(uid, _quantize(wave), labels_raw, split)


def environment_noise_params(environment: str, group: str, seed: int) -> dict:
    rng = np.random.default_rng(stable_seed("env-params", seed, environment))
    return {
        "centre": _GROUP_CENTRE[group] * rng.uniform(0.85, 1.15),
        "bandwidth": rng.uniform(0.5, 0.9),
        "mod_rate": rng.uniform(0.3, 6.0),
        "mod_depth": rng.uniform(0.3, 0.7),
    }


def synth_noise(nid: str, environment: str, split: str, params: dict, n_samples: int,
                rng: np.random.Generator) -> NoiseClip:
    """Band-passed coloured noise with slow amplitude modulation."""
    sr = SAMPLE_RATE
    white = rng.standard_normal(n_samples)
    spec = np.fft.rfft(white)
    freqs = np.fft.rfftfreq(n_samples, 1 / sr)
    logf = np.log2(np.maximum(freqs, 20.0))
    shape = np.exp(-0.5 * ((logf - np.log2(params["centre"])) / params["bandwidth"]) ** 2)
    shape += 0.02 / np.sqrt(np.maximum(freqs, 20.0) / 20.0)
    wave = np.fft.irfft(spec * shape, n=n_samples)
    t = np.arange(n_samples) / sr
    mod = 1.0 + params["mod_depth"] * np.sin(2 * np.pi * params["mod_rate"] * t + rng.uniform(0, 2 * np.pi))
    wave *= mod
    wave *= 0.05 / np.sqrt(np.mean(wave ** 2))
    return NoiseClip(nid, environment, _quantize(wave), split)


def _raw_labels(rng: np.random.Generator) -> LabelTriple:
    return LabelTriple(*np.round(rng.uniform(1.0, 7.0, size=3), 3))


def synth_corpus(config: SynthConfig | None = None, seed: int = 0,
                 catalog: EnvironmentCatalog | None = None) -> Corpus:
    """Generate a deterministic synthetic stand-in for the clean speech and noise corpora."""
    config = config or SynthConfig()
    config.validate()
    catalog = catalog or EnvironmentCatalog()
    utts: list[Utterance] = []
    lo, hi = config.duration
    for split, count in (("train", config.n_train), ("dev", config.n_dev), ("test", config.n_test)):
        for i in range(count):
            uid = f"{split}-{i:05d}"
            rng = np.random.default_rng(stable_seed("utt", seed, uid))
            labels = _raw_labels(rng)
            n = int(round(rng.uniform(lo, hi) * SAMPLE_RATE))
            utts.append(synth_utterance(uid, split, labels, n, rng))
    noises: list[NoiseClip] = []
    n_noise = int(round(config.noise_duration * SAMPLE_RATE))
    for split, envs in (("adapt", catalog.adapt_environments), ("test", catalog.test_environments)):
        for env in envs:
            params = environment_noise_params(env, catalog.group_of[env], seed)
            for k in range(config.noise_clips_per_env):
                nid = f"{env.replace(' ', '_')}-{k:02d}"
                rng = np.random.default_rng(stable_seed("noise", seed, nid))
                noises.append(synth_noise(nid, env, split, params, n_noise, rng))
    return Corpus(utts, noises, catalog)


def write_corpus(out_dir: str | Path, corpus: Corpus) -> dict[str, Path]:
    """Write WAVs, ``utterances.jsonl``, ``noise.jsonl`` and ``catalog.json``."""
    out = Path(out_dir)
    (out / "wav" / "utt").mkdir(parents=True, exist_ok=True)
    (out / "wav" / "noise").mkdir(parents=True, exist_ok=True)
    utt_recs = []
    for u in corpus.utterances:
        wav = out / "wav" / "utt" / f"{u.id}.wav"
        write_wav(wav, u.samples)
        utt_recs.append(UtteranceRecord(u.id, wav, u.labels_raw, u.split))
    noise_recs = []
    for n in corpus.noises:
        wav = out / "wav" / "noise" / f"{n.id}.wav"
        write_wav(wav, n.samples)
        noise_recs.append(NoiseRecord(n.id, wav, n.environment, n.split))
    paths = {"utterances": out / "utterances.jsonl", "noise": out / "noise.jsonl",
             "catalog": out / "catalog.json"}
    write_manifest(paths["utterances"], utt_recs)
    write_manifest(paths["noise"], noise_recs)
    corpus.catalog.save(paths["catalog"])
    return paths


def load_corpus(corpus_dir: str | Path) -> Corpus:
    root = Path(corpus_dir)
    catalog = EnvironmentCatalog.load(root / "catalog.json")
    utts = [r.load() for r in load_manifest(root / "utterances.jsonl")]
    noises = [r.load() for r in load_manifest(root / "noise.jsonl")]
    for n in noises:
        if n.environment not in catalog.group_of:
            raise ValidationError(f"noise {n.id}: environment {n.environment!r} not in catalog")
        expected = "adapt" if n.environment in catalog.adapt_environments else "test"
        if n.split != expected:
            raise ValidationError(f"noise {n.id}: environment {n.environment!r} belongs to split {expected}")
    return Corpus(utts, noises, catalog)
