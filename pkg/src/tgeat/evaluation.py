"""Replicated noisy-set evaluation, Welch significance tests and representation analysis."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np
import torch

from .corpus import ATTRIBUTES, EnvironmentCatalog, NoiseClip, Utterance, WaveformStats, z_normalize
from .envtext import DEFAULT_TEMPLATE, EncoderProvider
from .errors import ValidationError
from .mixer import EvalSetSpec, realize_set
from .model import SerModel, acoustic_pool
from .training import ccc_triple, collate, encode_environments, predict

SIGNIFICANCE_LEVEL = 0.05
# marker per baseline, as in the usual comparison-table notation
BASELINE_MARKERS = {"original": "∗", "rt": "†", "dat": "★"}


# ---------------------------------------------------------------------------
# reports


@dataclass
class EvalReport:
    model_id: str
    provider_id: Optional[str]
    per_set: dict  # (snr_db, replication) -> (arousal, dominance, valence)

    def snr_levels(self) -> list[float]:
        return sorted({k[0] for k in self.per_set}, reverse=True)

    def series(self, snr_db: float, attribute: int | str) -> list[float]:
        i = ATTRIBUTES.index(attribute) if isinstance(attribute, str) else attribute
        keys = sorted(k for k in self.per_set if k[0] == snr_db)
        return [self.per_set[k][i] for k in keys]

    @property
    def means(self) -> dict[float, tuple[float, float, float]]:
        return {snr: tuple(float(np.mean(self.series(snr, i))) for i in range(3)) for snr in self.snr_levels()}

    def validate(self, n_replications: int = 10) -> None:
        for snr in self.snr_levels():
            n = sum(1 for k in self.per_set if k[0] == snr)
            if n != n_replications:
                raise ValidationError(f"{self.model_id}: {n} replications at {snr} dB, expected {n_replications}")

    def to_json(self) -> dict:
        return {
            "model_id": self.model_id,
            "provider_id": self.provider_id,
            "sets": [{"snr_db": k[0], "replication": k[1], "ccc": list(v)} for k, v in sorted(self.per_set.items())],
            "means": [{"snr_db": s, "ccc": list(m)} for s, m in self.means.items()],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "EvalReport":
        per_set = {(float(r["snr_db"]), int(r["replication"])): tuple(r["ccc"]) for r in obj["sets"]}
        return cls(obj["model_id"], obj.get("provider_id"), per_set)


def evaluate(model: SerModel, eval_sets: Sequence[EvalSetSpec], utterances: Mapping[str, Utterance],
             noises: Mapping[str, NoiseClip], stats: WaveformStats, provider: Optional[EncoderProvider] = None,
             model_id: str = "model", template: str = DEFAULT_TEMPLATE, batch_size: int = 64) -> EvalReport:
    """Corpus-level CCC for every (SNR, replication) set.

    Text-fused models receive the true environment prompt of each sample;
    a provider that cannot encode it raises instead of falling back.
    """
    model.eval()
    fused = model.config.fusion == "text"
    per_set = {}
    for es in eval_sets:
        mixed = realize_set(es, utterances, noises)
        waves = [z_normalize(m.samples, stats) for m in mixed]
        envs = [m.environment for m in mixed] if fused else None
        preds = predict(model, waves, envs, provider if fused else None, batch_size, template)
        labels = np.stack([m.labels.as_array() for m in mixed])
        per_set[(es.snr_db, es.replication_index)] = ccc_triple(preds, labels)
    return EvalReport(model_id, provider.provider_id if (fused and provider) else None, per_set)


# ---------------------------------------------------------------------------
# Welch's t-test


def _betacf(a: float, b: float, x: float, max_iter: int = 500, eps: float = 1e-16) -> float:
    """Continued fraction for the incomplete beta function (modified Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = 1.0 / (d if abs(d) > tiny else tiny)
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < eps:
            return h
    raise ArithmeticError("incomplete beta continued fraction did not converge")


def betainc_regularized(a: float, b: float, x: float) -> float:
    if not 0.0 <= x <= 1.0:
        raise ValueError("x must lie in [0, 1]")
    if x == 0.0 or x == 1.0:
        return x
    log_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                 + a * math.log(x) + b * math.log1p(-x))
    if x < (a + 1.0) / (a + b + 2.0):
        return math.exp(log_front) * _betacf(a, b, x) / a
    return 1.0 - math.exp(log_front) * _betacf(b, a, 1.0 - x) / b


def student_t_sf(t: float, df: float) -> float:
    """P(T > t) for Student's t with ``df`` degrees of freedom."""
    if math.isinf(t):
        return 0.0 if t > 0 else 1.0
    tail = 0.5 * betainc_regularized(df / 2.0, 0.5, df / (df + t * t))
    return tail if t >= 0 else 1.0 - tail


@dataclass(frozen=True)
class WelchResult:
    t: float
    df: float
    p_one_tailed: float
    significant: bool


def welch_one_tailed(a: Sequence[float], b: Sequence[float], alpha: float = SIGNIFICANCE_LEVEL) -> WelchResult:
    """One-tailed Welch test of mean(a) > mean(b).

    With zero variance in both groups the statistic is 0 (p=0.5) for equal
    means and +/-inf otherwise; df then falls back to n_a + n_b - 2.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size < 2 or b.size < 2:
        raise ValidationError("each group needs at least 2 values")
    na, nb = a.size, b.size
    va, vb = a.var(ddof=1) / na, b.var(ddof=1) / nb
    diff = a.mean() - b.mean()
    se2 = va + vb
    if se2 == 0.0:
        df = float(na + nb - 2)
        if diff == 0.0:
            return WelchResult(0.0, df, 0.5, False)
        t = math.copysign(math.inf, diff)
        p = 0.0 if diff > 0 else 1.0
        return WelchResult(t, df, p, p < alpha)
    t = float(diff / math.sqrt(se2))
    df = float(se2 ** 2 / (va ** 2 / (na - 1) + vb ** 2 / (nb - 1)))
    p = min(1.0, max(0.0, student_t_sf(t, df)))
    return WelchResult(t, df, p, p < alpha)


# ---------------------------------------------------------------------------
# representation analysis


@dataclass(frozen=True)
class EmbDiffRecord:
    layer: str
    mode: str
    value: float


def mean_square_difference(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValidationError(f"representation shapes differ: {a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2))


def _layer_index(layer, n_layers: int) -> int:
    if layer == "first":
        return 0
    if layer == "last":
        return n_layers - 1
    if isinstance(layer, int) and 1 <= layer <= n_layers:
        return layer - 1
    raise ValidationError(f"invalid layer {layer!r}; use 'first', 'last' or 1..{n_layers}")


@torch.no_grad()
def pooled_layer(model: SerModel, waves: Sequence[np.ndarray], layer, environments=None,
                 provider: Optional[EncoderProvider] = None, template: str = DEFAULT_TEMPLATE) -> np.ndarray:
    """Per-utterance mean over acoustic slots of one transformer layer's output."""
    model.eval()
    li = _layer_index(layer, model.config.n_layers)
    x, lengths = collate(waves)
    text = None
    if model.config.fusion == "text":
        if provider is None or environments is None:
            raise ValidationError("text-fused model needs a provider and environments")
        text = encode_environments(provider, environments, template)
    out = model(x, lengths, text, return_trace=True)
    rep = out.trace.layers[li]
    return acoustic_pool(rep, out.frame_lengths, out.n_frames).double().numpy()


def embedding_difference(model: SerModel, clean: Sequence[np.ndarray], noisy: Sequence[np.ndarray], *,
                         layer="last", mode: str = "same_model", original: Optional[SerModel] = None,
                         environments: Optional[Sequence[str]] = None,
                         provider: Optional[EncoderProvider] = None, template: str = DEFAULT_TEMPLATE,
                         batch_size: int = 64) -> EmbDiffRecord:
    """Mean-square difference between pooled clean and noisy representations.

    ``same_model`` runs both passes through ``model``; ``vs_original`` takes
    the clean pass from ``original``. Inputs must be z-normalized and paired
    index by index; the value is averaged over utterances.
    """
    if mode not in ("same_model", "vs_original"):
        raise ValidationError(f"unknown mode {mode!r}")
    if len(clean) != len(noisy):
        raise ValidationError("clean and noisy lists differ in length")
    for c, n in zip(clean, noisy):
        if len(c) != len(n):
            raise ValidationError("clean and noisy utterances differ in length")
    clean_model = model if mode == "same_model" else original
    if clean_model is None:
        raise ValidationError("vs_original mode needs the original model")
    if clean_model.config.n_layers != model.config.n_layers:
        raise ValidationError("models have different depths")
    total = 0.0
    for s in range(0, len(clean), batch_size):
        envs = environments[s:s + batch_size] if environments is not None else None
        a = pooled_layer(clean_model, clean[s:s + batch_size], layer, envs, provider, template)
        b = pooled_layer(model, noisy[s:s + batch_size], layer, envs, provider, template)
        total += float(np.sum(np.mean((a - b) ** 2, axis=1)))
    return EmbDiffRecord(str(layer), mode, total / len(clean))


# ---------------------------------------------------------------------------
# text-embedding export


def pca_2d(vectors: np.ndarray) -> np.ndarray:
    """First two principal-component scores; each component's largest |loading| is made positive."""
    x = np.asarray(vectors, dtype=np.float64)
    xc = x - x.mean(axis=0)
    _, _, vt = np.linalg.svd(xc, full_matrices=False)
    comps = vt[:2]
    for i in range(comps.shape[0]):
        j = int(np.argmax(np.abs(comps[i])))
        if comps[i, j] < 0:
            comps[i] = -comps[i]
    coords = xc @ comps.T
    if coords.shape[1] < 2:
        coords = np.pad(coords, ((0, 0), (0, 2 - coords.shape[1])))
    return coords


def export_embeddings_2d(provider: EncoderProvider, catalog: EnvironmentCatalog,
                         template: str = DEFAULT_TEMPLATE):
    """Returns ([(environment, x, y), ...], raw vectors array) over the full catalog."""
    envs = catalog.all_environments
    with torch.no_grad():
        vecs = np.stack([provider.encode_environment(e, template).double().numpy() for e in envs])
    coords = pca_2d(vecs)
    rows = [(e, float(c[0]), float(c[1])) for e, c in zip(envs, coords)]
    return rows, vecs


def write_embedding_export(out_dir: str | Path, provider: EncoderProvider, catalog: EnvironmentCatalog,
                           template: str = DEFAULT_TEMPLATE) -> tuple[Path, Path]:
    rows, vecs = export_embeddings_2d(provider, catalog, template)
    out = Path(out_dir)
    csv_path = out / f"embeddings2d_{provider.provider_id}.csv"
    raw_path = out / f"embeddings_{provider.provider_id}.jsonl"
    with csv_path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["environment", "x", "y"])
        for env, x, y in rows:
            w.writerow([env, f"{x:.8f}", f"{y:.8f}"])
    with raw_path.open("w") as fh:
        for env, v in zip(catalog.all_environments, vecs):
            fh.write(json.dumps({"environment": env, "group": catalog.group_of[env],
                                 "vector": [float(t) for t in v]}) + "\n")
    return csv_path, raw_path


# ---------------------------------------------------------------------------
# tables


def significance_markers(reports: Mapping[str, EvalReport], name: str, snr: float, attr: int) -> str:
    marks = ""
    for base, mark in BASELINE_MARKERS.items():
        if base == name or base not in reports:
            continue
        res = welch_one_tailed(reports[name].series(snr, attr), reports[base].series(snr, attr))
        if res.significant:
            marks += mark
    return marks


def comparison_rows(reports: Mapping[str, EvalReport]) -> list[dict]:
    rows = []
    snrs = sorted({s for r in reports.values() for s in r.snr_levels()}, reverse=True)
    for snr in snrs:
        for name, rep in reports.items():
            means = rep.means[snr]
            rows.append({"snr_db": snr, "model": name,
                         **{a: means[i] for i, a in enumerate(ATTRIBUTES)},
                         **{f"{a}_sig": significance_markers(reports, name, snr, i) for i, a in enumerate(ATTRIBUTES)}})
    return rows


def render_table(reports: Mapping[str, EvalReport]) -> str:
    rows = comparison_rows(reports)
    width = max([len("Model")] + [len(r["model"]) for r in rows])
    lines = [f"{'SNR':>6}  {'Model':<{width}}  {'Arousal':>10}  {'Dominance':>10}  {'Valence':>10}"]
    last_snr = None
    for r in rows:
        if r["snr_db"] != last_snr:
            lines.append("-" * len(lines[0]))
            last_snr = r["snr_db"]
        cells = [f"{r[a]:.3f}{r[a + '_sig']}" for a in ATTRIBUTES]
        lines.append(f"{r['snr_db']:>4g}dB  {r['model']:<{width}}  " + "  ".join(f"{c:>10}" for c in cells))
    lines.append("")
    lines.append("markers: significantly better (one-tailed Welch, p<0.05) than "
                 + ", ".join(f"{m} {b}" for b, m in BASELINE_MARKERS.items()))
    return "\n".join(lines) + "\n"


def render_csv(reports: Mapping[str, EvalReport]) -> str:
    buf = io.StringIO()
    fields = ["snr_db", "model", *ATTRIBUTES, *(f"{a}_sig" for a in ATTRIBUTES)]
    w = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
    w.writeheader()
    for r in comparison_rows(reports):
        w.writerow({k: (f"{v:.6f}" if isinstance(v, float) and k in ATTRIBUTES else v) for k, v in r.items()})
    return buf.getvalue()
