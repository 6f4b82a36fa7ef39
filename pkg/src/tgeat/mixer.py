"""SNR-controlled contamination of clean speech with environment noise."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .corpus import EnvironmentCatalog, LabelTriple, NoiseClip, Utterance, stable_seed
from .errors import DependencyError, ValidationError, ZeroPowerError

ADAPT_SNRS = (2.5, 7.5, 12.5)
TEST_SNRS = (5.0, 0.0, -5.0)
N_REPLICATIONS = 10


@dataclass(frozen=True)
class MixSpec:
    utterance_id: str
    noise_id: str
    noise_offset: int
    target_snr_db: float
    scale: float
    seed: int

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "MixSpec":
        return cls(str(obj["utterance_id"]), str(obj["noise_id"]), int(obj["noise_offset"]),
                   float(obj["target_snr_db"]), float(obj["scale"]), int(obj["seed"]))


@dataclass
class MixedSample:
    samples: np.ndarray
    spec: MixSpec
    environment: str
    labels: LabelTriple


@dataclass
class EvalSetSpec:
    replication_index: int
    snr_db: float
    seed: int
    specs: list[MixSpec]

    def header(self) -> dict:
        return {"replication": self.replication_index, "snr_db": self.snr_db, "seed": self.seed}


def measure_power(samples) -> float:
    x = np.asarray(samples, dtype=np.float64)
    if x.size == 0:
        raise ValueError("cannot measure power of an empty signal")
    return float(np.mean(x * x))


def fit_noise(noise: NoiseClip | np.ndarray, length: int, offset: int = 0) -> np.ndarray:
    """Tile ``noise`` cyclically from ``offset`` to exactly ``length`` samples."""
    x = np.asarray(noise.samples if isinstance(noise, NoiseClip) else noise)
    if x.size == 0:
        raise ValueError("empty noise clip")
    idx = (offset + np.arange(length)) % x.size
    return x[idx]


def compute_scale(p_signal: float, p_noise: float, target_snr_db: float) -> float:
    """Noise gain so that clean + gain*noise sits at ``target_snr_db``."""
    if p_signal <= 0:
        raise ZeroPowerError(f"signal power must be positive, got {p_signal}")
    if p_noise <= 0:
        raise ZeroPowerError(f"noise power must be positive, got {p_noise}")
    return math.sqrt(p_signal / (p_noise * 10.0 ** (target_snr_db / 10.0)))


def snr_db(clean, noise_part) -> float:
    return 10.0 * math.log10(measure_power(clean) / measure_power(noise_part))


def mix_arrays(clean: np.ndarray, noise: np.ndarray, target_snr_db: float, offset: int):
    """Return (mixture, fitted noise, scale); computed in float64."""
    clean = np.asarray(clean, dtype=np.float64)
    fitted = fit_noise(np.asarray(noise, dtype=np.float64), clean.size, offset)
    p_s = measure_power(clean)
    p_n = measure_power(fitted)
    if p_s == 0:
        raise ZeroPowerError("utterance has zero power")
    if p_n == 0:
        raise ZeroPowerError("noise segment has zero power")
    scale = compute_scale(p_s, p_n, target_snr_db)
    return clean + scale * fitted, fitted, scale


def mix(utterance: Utterance, noise: NoiseClip, target_snr_db: float, seed: int) -> MixedSample:
    if utterance.samples.size == 0 or noise.samples.size == 0:
        raise ValueError("cannot mix empty signals")
    if measure_power(noise.samples) == 0:
        raise ZeroPowerError(f"noise {noise.id} has zero power")
    rng = np.random.default_rng(seed)
    offset = int(rng.integers(noise.samples.size))
    mixed, _, scale = mix_arrays(utterance.samples, noise.samples, target_snr_db, offset)
    spec = MixSpec(utterance.id, noise.id, offset, float(target_snr_db), scale, int(seed))
    return MixedSample(mixed.astype(np.float32), spec, noise.environment, utterance.labels)


def realize(spec: MixSpec, utterance: Utterance, noise: NoiseClip) -> MixedSample:
    """Rebuild a mixture from a stored spec (uses the stored scale, not a refit)."""
    fitted = fit_noise(np.asarray(noise.samples, dtype=np.float64), utterance.samples.size, spec.noise_offset)
    mixed = np.asarray(utterance.samples, dtype=np.float64) + spec.scale * fitted
    return MixedSample(mixed.astype(np.float32), spec, noise.environment, utterance.labels)


def achieved_snr(spec: MixSpec, utterance: Utterance, noise: NoiseClip) -> float:
    fitted = fit_noise(np.asarray(noise.samples, dtype=np.float64), utterance.samples.size, spec.noise_offset)
    return snr_db(utterance.samples, spec.scale * fitted)


def sample_adapt_condition(catalog: EnvironmentCatalog, rng: np.random.Generator,
                           snrs: Sequence[float] = ADAPT_SNRS) -> tuple[str, float]:
    env = catalog.adapt_environments[int(rng.integers(len(catalog.adapt_environments)))]
    snr = float(snrs[int(rng.integers(len(snrs)))])
    return env, snr


def pick_noise_clips(pool: Sequence[NoiseClip], n: int, rng: np.random.Generator) -> list[NoiseClip]:
    """Distinct clips when the pool is large enough, otherwise with replacement."""
    if not pool:
        raise DependencyError("empty noise pool")
    if len(pool) >= n:
        idx = rng.choice(len(pool), size=n, replace=False)
    else:
        idx = rng.integers(len(pool), size=n)
    return [pool[int(i)] for i in idx]


def build_eval_sets(test_utterances: Sequence[Utterance], test_noises: Sequence[NoiseClip], seed: int,
                    catalog: EnvironmentCatalog | None = None,
                    snr_levels: Sequence[float] = TEST_SNRS,
                    n_replications: int = N_REPLICATIONS,
                    allowed_environments: Iterable[str] | None = None) -> list[EvalSetSpec]:
    """Replicated noisy test sets: ``n_replications`` per SNR level, noise re-drawn per replication.

    By default only the held-out test environments are allowed; pass
    ``allowed_environments`` (e.g. the adapt list) for the seen-environment protocol.
    """
    if not test_noises:
        raise DependencyError("empty test noise pool")
    if allowed_environments is None:
        allowed = set(catalog.test_environments) if catalog else None
    else:
        allowed = set(allowed_environments)
    if allowed is not None:
        bad = sorted({n.environment for n in test_noises} - allowed)
        if bad:
            raise ValidationError(f"noise from disallowed environments: {bad}")
    sets = []
    for snr in snr_levels:
        for rep in range(n_replications):
            set_seed = stable_seed("evalset", seed, float(snr), rep) % (2 ** 63)
            rng = np.random.default_rng(set_seed)
            specs = []
            for utt in test_utterances:
                noise = test_noises[int(rng.integers(len(test_noises)))]
                sample_seed = stable_seed("mix", seed, utt.id, rep, float(snr)) % (2 ** 63)
                specs.append(mix(utt, noise, snr, sample_seed).spec)
            sets.append(EvalSetSpec(rep, float(snr), set_seed, specs))
    return sets


def realize_set(es: EvalSetSpec, utterances: dict[str, Utterance], noises: dict[str, NoiseClip]) -> list[MixedSample]:
    try:
        return [realize(s, utterances[s.utterance_id], noises[s.noise_id]) for s in es.specs]
    except KeyError as exc:
        raise DependencyError(f"eval set refers to unknown item {exc.args[0]!r}") from exc


def write_eval_set(path: str | Path, es: EvalSetSpec) -> None:
    with Path(path).open("w") as fh:
        fh.write(json.dumps(es.header(), sort_keys=True) + "\n")
        for s in es.specs:
            fh.write(json.dumps(s.to_json(), sort_keys=True) + "\n")


def read_eval_set(path: str | Path) -> EvalSetSpec:
    lines = [ln for ln in Path(path).read_text().splitlines() if ln.strip()]
    if not lines:
        raise ValidationError(f"{path}: empty eval set file")
    head = json.loads(lines[0])
    specs = [MixSpec.from_json(json.loads(ln)) for ln in lines[1:]]
    return EvalSetSpec(int(head["replication"]), float(head["snr_db"]), int(head["seed"]), specs)


def eval_set_filename(es: EvalSetSpec) -> str:
    return f"snr{es.snr_db:+.1f}_rep{es.replication_index:02d}.jsonl"
