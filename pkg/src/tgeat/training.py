"""CCC objective, warmup schedule and the staged training runs."""
from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .corpus import Corpus, EnvironmentCatalog, NoiseClip, Utterance, WaveformStats, compute_stats, stable_seed, z_normalize
from .envtext import DEFAULT_TEMPLATE, EncoderProvider
from .errors import ConfigError, DependencyError, ValidationError
from .mixer import ADAPT_SNRS, mix, pick_noise_clips, sample_adapt_condition
from .model import ModelConfig, SerModel

STAGES = ("clean_finetune", "rt", "dat", "tgeat")
DEGENERATE_EPS = 1e-12


# ---------------------------------------------------------------------------
# CCC


@dataclass(frozen=True)
class CccTerms:
    mean_x: float
    mean_y: float
    var_x: float
    var_y: float
    cov_xy: float


def ccc_terms(x, y) -> CccTerms:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValidationError(f"length mismatch: {x.shape} vs {y.shape}")
    if x.ndim != 1 or x.size < 2:
        raise ValidationError("ccc needs two 1-D sequences of length >= 2")
    mx, my = x.mean(), y.mean()
    dx, dy = x - mx, y - my
    return CccTerms(float(mx), float(my), float(np.mean(dx * dx)), float(np.mean(dy * dy)),
                    float(np.mean(dx * dy)))


def ccc(x, y) -> float:
    """Concordance correlation coefficient with population moments.

    A vanishing denominator (both sequences constant at the same value, up to
    1e-12) yields 1 when the sequences agree elementwise and 0 otherwise.
    """
    t = ccc_terms(x, y)
    den = t.var_x + t.var_y + (t.mean_x - t.mean_y) ** 2
    if den < DEGENERATE_EPS:
        same = np.all(np.abs(np.asarray(x, dtype=np.float64) - np.asarray(y, dtype=np.float64)) <= DEGENERATE_EPS)
        return 1.0 if same else 0.0
    return 2.0 * t.cov_xy / den


def ccc_torch(x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Differentiable CCC over dim 0; columns are scored independently."""
    mx, my = x.mean(0), y.mean(0)
    dx, dy = x - mx, y - my
    vx, vy = (dx * dx).mean(0), (dy * dy).mean(0)
    cov = (dx * dy).mean(0)
    den = vx + vy + (mx - my) ** 2
    safe = torch.where(den < DEGENERATE_EPS, torch.ones_like(den), den)
    value = 2.0 * cov / safe
    same = ((x - y).abs() <= DEGENERATE_EPS).all(0).to(x.dtype)
    return torch.where(den < DEGENERATE_EPS, same.detach(), value)


def ccc_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Sum over attributes of (1 - CCC), computed on mini-batch statistics."""
    if pred.shape != target.shape:
        raise ValidationError(f"shape mismatch {tuple(pred.shape)} vs {tuple(target.shape)}")
    if pred.shape[0] < 2:
        raise ValidationError("ccc_loss needs at least 2 items per batch")
    return (1.0 - ccc_torch(pred, target)).sum()


def ccc_triple(pred: np.ndarray, target: np.ndarray) -> tuple[float, float, float]:
    return tuple(ccc(pred[:, i], target[:, i]) for i in range(3))


# ---------------------------------------------------------------------------
# schedule


@dataclass
class ScheduleState:
    step: int = 0
    lr_start: float = 1e-8
    lr_peak: float = 1e-5
    warmup_steps: int = 1000

    @property
    def lr(self) -> float:
        return lr_at(self.step, self.lr_start, self.lr_peak, self.warmup_steps)


def lr_at(step: int, lr_start: float = 1e-8, lr_peak: float = 1e-5, warmup_steps: int = 1000) -> float:
    """Linear warmup from ``lr_start`` to ``lr_peak`` over ``warmup_steps``, constant after."""
    if step < 0:
        raise ValueError("step must be >= 0")
    if step >= warmup_steps:
        return lr_peak
    return lr_start + (lr_peak - lr_start) * step / warmup_steps


# ---------------------------------------------------------------------------
# configs and run records


@dataclass
class StageConfig:
    stage: str
    name: str = ""
    provider: Optional[str] = None
    provider_trainable: bool = False
    epochs: int = 10
    batch_size: int = 32
    seed: int = 0
    dat_lambda: Optional[float] = None
    grl_lambda: float = 1.0
    lr_start: float = 1e-8
    lr_peak: float = 1e-5
    warmup_steps: int = 1000
    max_steps: Optional[int] = None
    snr_levels: tuple = ADAPT_SNRS
    template: str = DEFAULT_TEMPLATE

    def __post_init__(self):
        if not self.name:
            self.name = self.stage if self.stage != "tgeat" else f"tgeat_{self.provider}"
        if self.stage == "dat" and self.dat_lambda is None:
            self.dat_lambda = 1.0
        self.snr_levels = tuple(float(s) for s in self.snr_levels)
        self.validate()

    def validate(self) -> None:
        if self.stage not in STAGES:
            raise ConfigError(f"unknown stage {self.stage!r}")
        if (self.provider is not None) != (self.stage == "tgeat"):
            raise ConfigError(f"stage {self.name}: provider is required for tgeat and only for tgeat")
        if self.provider_trainable and self.stage != "tgeat":
            raise ConfigError(f"stage {self.name}: provider_trainable only applies to tgeat")
        if (self.dat_lambda is not None) != (self.stage == "dat"):
            raise ConfigError(f"stage {self.name}: dat_lambda only applies to dat")
        if self.epochs < 1 or self.batch_size < 2:
            raise ConfigError(f"stage {self.name}: need epochs >= 1 and batch_size >= 2")

    def to_json(self) -> dict:
        d = asdict(self)
        d["snr_levels"] = list(self.snr_levels)
        return d

    @classmethod
    def from_json(cls, obj: dict) -> "StageConfig":
        return cls(**obj)


@dataclass
class TrainRun:
    config: StageConfig
    steps: list = field(default_factory=list)
    epochs: list = field(default_factory=list)
    best_epoch: int = -1
    model: Optional[SerModel] = None
    provider: Optional[EncoderProvider] = None

    @property
    def losses(self) -> np.ndarray:
        return np.array([s["loss"] for s in self.steps])

    def write_log(self, path: str | Path) -> None:
        with Path(path).open("w") as fh:
            for rec in self.steps:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
            for rec in self.epochs:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")


def select_best(dev_history: Sequence[Sequence[float]]) -> int:
    """Epoch with the highest unweighted CCC sum; the earliest wins ties."""
    if not dev_history:
        raise ValidationError("no dev evaluations to select from")
    sums = [float(np.sum(t)) for t in dev_history]
    return int(np.argmax(sums))


# ---------------------------------------------------------------------------
# data plumbing


@dataclass
class TrainData:
    train: list[Utterance]
    dev: list[Utterance]
    noise_by_env: dict[str, list[NoiseClip]]
    catalog: EnvironmentCatalog
    stats: WaveformStats

    @classmethod
    def from_corpus(cls, corpus: Corpus) -> "TrainData":
        train = corpus.split("train")
        return cls(train, corpus.split("dev"), corpus.noise_by_environment("adapt"), corpus.catalog,
                   compute_stats(train))


def collate(waves: Sequence[np.ndarray]) -> tuple[torch.Tensor, torch.Tensor]:
    lengths = torch.tensor([w.size for w in waves], dtype=torch.long)
    out = torch.zeros(len(waves), int(lengths.max()))
    for i, w in enumerate(waves):
        out[i, : w.size] = torch.from_numpy(np.asarray(w, dtype=np.float32))
    return out, lengths


def label_matrix(utts: Sequence[Utterance]) -> np.ndarray:
    return np.stack([u.labels.as_array() for u in utts])


def encode_environments(provider: EncoderProvider, envs: Sequence[str], template: str = DEFAULT_TEMPLATE) -> torch.Tensor:
    cache: dict[str, torch.Tensor] = {}
    rows = []
    for env in envs:
        if env not in cache:
            cache[env] = provider.encode_environment(env, template)
        rows.append(cache[env])
    return torch.stack(rows)


@torch.no_grad()
def predict(model: SerModel, waves: Sequence[np.ndarray], environments: Optional[Sequence[str]] = None,
            provider: Optional[EncoderProvider] = None, batch_size: int = 64,
            template: str = DEFAULT_TEMPLATE) -> np.ndarray:
    """Eval-mode predictions for already z-normalized waveforms."""
    was_training = model.training
    model.eval()
    fused = model.config.fusion == "text"
    if fused and (provider is None or environments is None):
        raise ValidationError("text-fused model needs a provider and per-sample environments")
    text_all = encode_environments(provider, environments, template) if fused else None
    out = []
    for start in range(0, len(waves), batch_size):
        x, lengths = collate(waves[start:start + batch_size])
        text = text_all[start:start + batch_size] if fused else None
        out.append(model(x, lengths, text).pred.double().numpy())
    model.train(was_training)
    return np.concatenate(out)


def contaminated_dev(data: TrainData, seed: int, snrs: Sequence[float]) -> tuple[list[np.ndarray], list[str]]:
    """Fixed per-stage dev mixtures drawn from the adapt environments and SNRs."""
    waves, envs = [], []
    for utt in data.dev:
        rng = np.random.default_rng(stable_seed("dev-mix", seed, utt.id))
        env, snr = sample_adapt_condition(data.catalog, rng, snrs)
        noise = pick_noise_clips(data.noise_by_env[env], 1, rng)[0]
        m = mix(utt, noise, snr, int(rng.integers(2 ** 63)))
        waves.append(z_normalize(m.samples, data.stats))
        envs.append(env)
    return waves, envs


# ---------------------------------------------------------------------------
# stages


def adapted_model(base: SerModel, stage: StageConfig, provider: Optional[EncoderProvider]) -> SerModel:
    """Copy a clean-fine-tuned model into the architecture a stage needs."""
    cfg = ModelConfig.from_json(base.config.to_json())
    if stage.stage == "tgeat":
        cfg.fusion = "text"
        cfg.text_dim = provider.dim
    if stage.stage == "dat":
        cfg.dat = True
        cfg.n_environments = 20
        cfg.grl_lambda = stage.grl_lambda
    cfg.validate()
    model = SerModel(cfg)
    missing, unexpected = model.load_state_dict(base.state_dict(), strict=False)
    if unexpected:
        raise ValidationError(f"unexpected parameters in stage-1 model: {unexpected}")
    model.freeze_conv(True)
    return model


def run_stage(stage: StageConfig, data: TrainData, model_config: Optional[ModelConfig] = None,
              init: Optional[SerModel] = None, provider: Optional[EncoderProvider] = None,
              log_every: int = 0) -> TrainRun:
    """Train one stage and return its run record with the best-epoch model loaded."""
    torch.manual_seed(stage.seed)
    rng = np.random.default_rng(stable_seed("stage", stage.seed, stage.name))
    catalog = data.catalog

    if stage.stage == "clean_finetune":
        if init is not None:
            raise ValidationError("clean_finetune starts from a fresh model")
        model = SerModel(model_config or ModelConfig())
    else:
        if init is None:
            raise DependencyError(f"stage {stage.name} needs the clean_finetune (stage-1) model")
        if stage.stage == "tgeat" and provider is None:
            raise DependencyError(f"stage {stage.name} needs an encoder provider")
        model = adapted_model(init, stage, provider)
    if stage.stage == "tgeat":
        provider.weight.requires_grad_(bool(stage.provider_trainable) and provider.supports_training)

    if stage.stage == "clean_finetune":
        dev_waves = [z_normalize(u.samples, data.stats) for u in data.dev]
        dev_envs = None
    else:
        dev_waves, dev_envs = contaminated_dev(data, stage.seed, stage.snr_levels)
        if stage.stage == "tgeat":
            encode_environments(provider, sorted(set(dev_envs)), stage.template)  # fail fast on unseen envs
    dev_labels = label_matrix(data.dev)
    train_clean = [z_normalize(u.samples, data.stats) for u in data.train] if stage.stage == "clean_finetune" else None

    params = model.adaptation_parameters() if stage.stage != "clean_finetune" else list(model.parameters())
    if stage.stage == "tgeat" and provider.trainable:
        params = params + [provider.weight]
    params = [p for p in params if p.requires_grad]
    opt = torch.optim.Adam(params, lr=stage.lr_start, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0)

    run = TrainRun(stage, model=model, provider=provider if stage.stage == "tgeat" else None)
    snapshots = []
    step = 0
    n = len(data.train)
    done = False
    for epoch in range(stage.epochs):
        model.train()
        order = rng.permutation(n)
        for start in range(0, n, stage.batch_size):
            idx = order[start:start + stage.batch_size]
            if idx.size < 2:
                continue
            utts = [data.train[i] for i in idx]
            labels = torch.from_numpy(label_matrix(utts)).float()
            env = None
            if stage.stage == "clean_finetune":
                waves = [train_clean[i] for i in idx]
            else:
                env, snr = sample_adapt_condition(catalog, rng, stage.snr_levels)
                clips = pick_noise_clips(data.noise_by_env[env], len(utts), rng)
                waves = [z_normalize(mix(u, c, snr, stable_seed("train-mix", stage.seed, epoch, step, u.id) % 2 ** 63).samples,
                                     data.stats) for u, c in zip(utts, clips)]
            x, lengths = collate(waves)
            text = None
            if stage.stage == "tgeat":
                text = provider.encode_environment(env, stage.template).expand(len(utts), -1)
            lr = lr_at(step, stage.lr_start, stage.lr_peak, stage.warmup_steps)
            for g in opt.param_groups:
                g["lr"] = lr
            out = model(x, lengths, text)
            loss_ccc = ccc_loss(out.pred, labels)
            loss = loss_ccc
            rec = {"step": step, "epoch": epoch, "lr": lr}
            components = {"ccc": loss_ccc.item()}
            if stage.stage == "dat":
                target = torch.full((len(utts),), catalog.index_of(env), dtype=torch.long)
                xent = F.cross_entropy(out.env_logits, target)
                loss = loss + stage.dat_lambda * xent
                components["xent"] = xent.item()
                rec["env_acc"] = float((out.env_logits.argmax(1) == target).float().mean())
            if env is not None:
                rec["environment"] = env
                rec["snr_db"] = snr
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            rec["loss"] = loss.item()
            rec["components"] = components
            run.steps.append(rec)
            if log_every and step % log_every == 0:
                print(f"[{stage.name}] step {step} loss {rec['loss']:.4f}", flush=True)
            step += 1
            if stage.max_steps is not None and step >= stage.max_steps:
                done = True
                break
        preds = predict(model, dev_waves, dev_envs, provider if stage.stage == "tgeat" else None,
                        template=stage.template)
        triple = ccc_triple(preds, dev_labels)
        run.epochs.append({"epoch": epoch, "dev_ccc": list(triple)})
        snapshots.append(_snapshot(model, provider if stage.stage == "tgeat" else None))
        if done:
            break
    run.best_epoch = select_best([e["dev_ccc"] for e in run.epochs])
    _restore(model, provider if stage.stage == "tgeat" else None, snapshots[run.best_epoch])
    model.eval()
    return run


def _snapshot(model, provider):
    state = copy.deepcopy(model.state_dict())
    pw = provider.weight.detach().clone() if provider is not None and provider.trainable else None
    return state, pw


def _restore(model, provider, snap):
    state, pw = snap
    model.load_state_dict(state)
    if pw is not None:
        with torch.no_grad():
            provider.weight.copy_(pw)
