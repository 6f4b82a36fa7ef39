"""End-to-end experiment orchestration shared by the CLI and the acceptance suite."""
from __future__ import annotations

import copy
import hashlib
import json
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import __version__
from .corpus import Corpus, SynthConfig, stable_seed, synth_corpus, z_normalize
from .envtext import DEFAULT_TEMPLATE, EncoderProvider, build_provider
from .errors import ConfigError, DependencyError
from .evaluation import EmbDiffRecord, EvalReport, embedding_difference, evaluate
from .mixer import EvalSetSpec, build_eval_sets, mix, pick_noise_clips
from .model import ModelConfig
from .training import StageConfig, TrainData, TrainRun, run_stage

ADAPT_STAGES = ("rt", "dat", "tgeat")


def default_stages(epochs: int = 10, adapt_epochs: Optional[int] = None, lr_peak: float = 1e-3,
                   warmup_steps: int = 100, providers=("semantic", "audio_grounded")) -> list[StageConfig]:
    """The Original / RT / DAT / TG-EAT line-up with desk-scale learning rates."""
    adapt_epochs = adapt_epochs or epochs
    common = dict(lr_peak=lr_peak, warmup_steps=warmup_steps)
    stages = [StageConfig("clean_finetune", name="original", epochs=epochs, **common),
              StageConfig("rt", name="rt", epochs=adapt_epochs, **common),
              StageConfig("dat", name="dat", epochs=adapt_epochs, **common)]
    for p in providers:
        stages.append(StageConfig("tgeat", provider=p, epochs=adapt_epochs, **common))
    return stages


@dataclass
class ExperimentConfig:
    seed: int = 0
    corpus_seed: int = 0
    synth: SynthConfig = field(default_factory=SynthConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    stages: list = field(default_factory=default_stages)
    provider_dim: int = 64
    provider_seed: int = 0
    template: str = DEFAULT_TEMPLATE
    table_path: Optional[str] = None
    eval_seed: int = 0
    eval_replications: int = 10
    eval_environments: str = "test"
    analysis_snr: float = -5.0
    analysis_items: int = 100

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        names = [s.name for s in self.stages]
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate stage names: {names}")
        first_clean = next((i for i, s in enumerate(self.stages) if s.stage == "clean_finetune"), None)
        if first_clean is None:
            raise ConfigError("experiment needs a clean_finetune stage")
        for i, s in enumerate(self.stages):
            if s.stage in ADAPT_STAGES and i < first_clean:
                raise ConfigError(f"stage {s.name} is listed before clean_finetune")
        if self.eval_environments not in ("test", "adapt"):
            raise ConfigError("eval_environments must be 'test' (unseen) or 'adapt' (seen)")

    def stage_seed(self, stage: StageConfig) -> int:
        return stable_seed("stage-seed", self.seed, stage.name) % 2 ** 31

    def to_json(self) -> dict:
        return {
            "seed": self.seed, "corpus_seed": self.corpus_seed,
            "synth": {**self.synth.__dict__, "duration": list(self.synth.duration)},
            "model": self.model.to_json(),
            "stages": [s.to_json() for s in self.stages],
            "provider_dim": self.provider_dim, "provider_seed": self.provider_seed,
            "template": self.template, "table_path": self.table_path,
            "eval_seed": self.eval_seed, "eval_replications": self.eval_replications,
            "eval_environments": self.eval_environments,
            "analysis_snr": self.analysis_snr, "analysis_items": self.analysis_items,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ExperimentConfig":
        obj = dict(obj)
        known = set(cls.__dataclass_fields__)
        unknown = set(obj) - known - {"paths"}
        if unknown:
            raise ConfigError(f"unknown experiment config keys: {sorted(unknown)}")
        obj.pop("paths", None)
        if "synth" in obj:
            obj["synth"] = SynthConfig.from_json(obj["synth"])
        if "model" in obj:
            obj["model"] = ModelConfig.from_json(obj["model"])
        if "stages" in obj:
            obj["stages"] = [StageConfig.from_json(s) for s in obj["stages"]]
        try:
            return cls(**obj)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def content_hash(self) -> str:
        return config_hash(self.to_json())


def config_hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def run_metadata(config_obj: dict, seed: int) -> dict:
    return {"config_hash": config_hash(config_obj), "seed": seed, "code_version": f"tgeat {__version__}"}


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    corpus: Corpus
    data: TrainData
    runs: dict = field(default_factory=dict)
    providers: dict = field(default_factory=dict)
    eval_sets: list = field(default_factory=list)
    reports: dict = field(default_factory=dict)
    analysis: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)

    @property
    def original(self) -> TrainRun:
        return next(r for r in self.runs.values() if r.config.stage == "clean_finetune")


def make_provider(config: ExperimentConfig, stage: StageConfig, corpus: Corpus) -> EncoderProvider:
    provider = build_provider(stage.provider, corpus.catalog, corpus.noises, dim=config.provider_dim,
                              seed=config.provider_seed, template=stage.template, table_path=config.table_path)
    return provider


def make_eval_sets(config: ExperimentConfig, corpus: Corpus) -> list[EvalSetSpec]:
    test_utts = corpus.split("test")
    if config.eval_environments == "test":
        pool = corpus.noise_split("test")
        allowed = corpus.catalog.test_environments
    else:
        pool = corpus.noise_split("adapt")
        allowed = corpus.catalog.adapt_environments
    return build_eval_sets(test_utts, pool, config.eval_seed, corpus.catalog,
                           n_replications=config.eval_replications, allowed_environments=allowed)


def train_all(config: ExperimentConfig, corpus: Corpus, data: TrainData, log_every: int = 0,
              result: Optional[ExperimentResult] = None) -> ExperimentResult:
    result = result or ExperimentResult(config, corpus, data)
    base = None
    for stage in config.stages:
        stage = copy.deepcopy(stage)
        stage.seed = config.stage_seed(stage)
        t0 = time.time()
        if stage.stage == "clean_finetune":
            run = run_stage(stage, data, config.model, log_every=log_every)
            base = run.model
        else:
            if base is None:
                raise DependencyError(f"stage {stage.name} needs the clean_finetune stage")
            provider = make_provider(config, stage, corpus) if stage.stage == "tgeat" else None
            run = run_stage(stage, data, init=base, provider=provider, log_every=log_every)
            if provider is not None:
                result.providers[stage.name] = provider
        result.runs[stage.name] = run
        result.timings[stage.name] = time.time() - t0
    return result


def analysis_pairs(config: ExperimentConfig, data: TrainData):
    """Dev utterances paired with a fixed contamination at the analysis SNR."""
    items = data.dev[: config.analysis_items]
    clean, noisy, envs = [], [], []
    for utt in items:
        rng = np.random.default_rng(stable_seed("analysis", config.seed, utt.id))
        env = data.catalog.adapt_environments[int(rng.integers(20))]
        noise = pick_noise_clips(data.noise_by_env[env], 1, rng)[0]
        m = mix(utt, noise, config.analysis_snr, int(rng.integers(2 ** 63)))
        clean.append(z_normalize(utt.samples, data.stats))
        noisy.append(z_normalize(m.samples, data.stats))
        envs.append(env)
    return clean, noisy, envs


def analyze(result: ExperimentResult) -> dict[str, list[EmbDiffRecord]]:
    config = result.config
    clean, noisy, envs = analysis_pairs(config, result.data)
    original = result.original.model
    out = {}
    for name, run in result.runs.items():
        provider = result.providers.get(name)
        tmpl = run.config.template
        recs = []
        for layer in ("first", "last"):
            recs.append(embedding_difference(run.model, clean, noisy, layer=layer, mode="same_model",
                                             environments=envs, provider=provider, template=tmpl))
            recs.append(embedding_difference(run.model, clean, noisy, layer=layer, mode="vs_original",
                                             original=original, environments=envs, provider=provider,
                                             template=tmpl))
        out[name] = recs
    result.analysis = out
    return out


def evaluate_all(result: ExperimentResult) -> dict[str, EvalReport]:
    corpus = result.corpus
    if not result.eval_sets:
        result.eval_sets = make_eval_sets(result.config, corpus)
    utts = {u.id: u for u in corpus.utterances}
    noises = {n.id: n for n in corpus.noises}
    for name, run in result.runs.items():
        t0 = time.time()
        result.reports[name] = evaluate(run.model, result.eval_sets, utts, noises, result.data.stats,
                                        result.providers.get(name), model_id=name,
                                        template=run.config.template)
        result.timings[f"eval:{name}"] = time.time() - t0
    return result.reports


def run_experiment(config: ExperimentConfig, corpus: Optional[Corpus] = None, log_every: int = 0,
                   with_analysis: bool = True) -> ExperimentResult:
    corpus = corpus or synth_corpus(config.synth, config.corpus_seed)
    data = TrainData.from_corpus(corpus)
    result = train_all(config, corpus, data, log_every)
    evaluate_all(result)
    if with_analysis:
        analyze(result)
    return result
