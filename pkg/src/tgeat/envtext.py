"""Environment prompts and the encoder providers that turn them into vectors.

Every provider is a small ``torch.nn.Module`` holding a table of token (or
name) vectors. Prompts are tokenized, each token looked up, and the token
vectors average-pooled. Providers that support it can be made trainable so
their table joins the adaptation parameter set.
"""
from __future__ import annotations

import json
import string
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
from torch import nn

from .corpus import EnvironmentCatalog, NoiseClip, stable_seed
from .errors import ConfigError, LookupFailure, TemplateError, UnseenEnvironmentError, UnsupportedError, ValidationError
from .wavio import SAMPLE_RATE

PLACEHOLDER = "{environment}"
DEFAULT_TEMPLATE = "This speech is recorded in {environment}."
_STRIP = string.punctuation


@dataclass(frozen=True)
class EnvironmentPrompt:
    environment: str
    template: str
    rendered: str


@dataclass
class TextEmbedding:
    vector: np.ndarray
    dim: int
    provider: str


def render_prompt(environment: str, template: str = DEFAULT_TEMPLATE) -> EnvironmentPrompt:
    n = template.count(PLACEHOLDER)
    if n != 1:
        raise TemplateError(f"template must contain {PLACEHOLDER} exactly once, found {n}: {template!r}")
    return EnvironmentPrompt(environment, template, template.replace(PLACEHOLDER, environment))


def tokenize(text: str) -> list[str]:
    """Lowercase, whitespace split, punctuation stripped from token edges."""
    out = []
    for raw in text.lower().split():
        tok = raw.strip(_STRIP)
        if tok:
            out.append(tok)
    return out


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def _seeded_unit(dim: int, *keys) -> np.ndarray:
    rng = np.random.default_rng(stable_seed(*keys))
    return _unit(rng.standard_normal(dim))


def _template_tokens(template: str) -> list[str]:
    render_prompt("x", template)  # validates
    return tokenize(template.replace(PLACEHOLDER, " "))


class EncoderProvider(nn.Module):
    """Base provider: a key -> vector table plus a pooling rule.

    Subclasses decide which keys a prompt maps to (``keys_for``).
    """

    kind = "base"
    supports_training = True

    def __init__(self, provider_id: str, keys: Sequence[str], vectors: np.ndarray):
        super().__init__()
        vectors = np.asarray(vectors, dtype=np.float32)
        if vectors.ndim != 2 or vectors.shape[0] != len(keys):
            raise ValidationError(f"vector table shape {vectors.shape} does not match {len(keys)} keys")
        if not np.all(np.isfinite(vectors)):
            raise ValidationError("non-finite provider vectors")
        self.provider_id = provider_id
        self.keys = list(keys)
        self.index = {k: i for i, k in enumerate(self.keys)}
        self.weight = nn.Parameter(torch.from_numpy(vectors.copy()), requires_grad=False)

    @property
    def dim(self) -> int:
        return int(self.weight.shape[1])

    @property
    def trainable(self) -> bool:
        return bool(self.weight.requires_grad)

    def keys_for(self, prompt: EnvironmentPrompt) -> list[str]:
        toks = tokenize(prompt.rendered)
        if not toks:
            raise ValidationError("empty prompt")
        return toks

    def lookup(self, key: str) -> torch.Tensor:
        try:
            return self.weight[self.index[key]]
        except KeyError:
            raise LookupFailure(f"{self.provider_id}: no vector for {key!r}") from None

    def encode(self, prompt: EnvironmentPrompt) -> torch.Tensor:
        keys = self.keys_for(prompt)
        idx = []
        for k in keys:
            if k not in self.index:
                self.lookup(k)
            idx.append(self.index[k])
        return self.weight[torch.tensor(idx)].mean(dim=0)

    def encode_environment(self, environment: str, template: str = DEFAULT_TEMPLATE) -> torch.Tensor:
        return self.encode(render_prompt(environment, template))

    def embed(self, prompt: EnvironmentPrompt) -> TextEmbedding:
        with torch.no_grad():
            v = self.encode(prompt).detach().cpu().numpy().astype(np.float64)
        return TextEmbedding(v, self.dim, self.provider_id)

    def to_arrays(self) -> dict:
        return {"kind": self.kind, "provider_id": self.provider_id, "keys": list(self.keys),
                "weight": self.weight.detach().cpu().numpy().copy()}


class TokenProvider(EncoderProvider):
    kind = "token"


class OneHotProvider(EncoderProvider):
    kind = "one_hot"
    supports_training = False

    def __init__(self, environments: Sequence[str]):
        super().__init__("one_hot", environments, np.eye(len(environments), dtype=np.float32))

    def keys_for(self, prompt):
        if prompt.environment not in self.index:
            raise UnseenEnvironmentError(
                f"one-hot encoding cannot represent unseen environment {prompt.environment!r}")
        return [prompt.environment]


class TableProvider(EncoderProvider):
    """Direct lookup of the environment name; multi-word names are mean-pooled."""

    kind = "table"

    def keys_for(self, prompt):
        if prompt.environment in self.index:
            return [prompt.environment]
        words = tokenize(prompt.environment)
        if not words:
            raise ValidationError("empty environment name")
        return words


class PrecomputedProvider(EncoderProvider):
    """Vectors produced elsewhere (e.g. a real text encoder), keyed by rendered prompt."""

    kind = "precomputed"

    def keys_for(self, prompt):
        if prompt.rendered not in self.index:
            raise LookupFailure(f"{self.provider_id}: no precomputed vector for {prompt.rendered!r}")
        return [prompt.rendered]


_KINDS = {cls.kind: cls for cls in (TokenProvider, TableProvider, PrecomputedProvider)}


def provider_from_arrays(obj: dict) -> EncoderProvider:
    kind = str(obj["kind"])
    if kind == "one_hot":
        return OneHotProvider(list(obj["keys"]))
    return _KINDS[kind](str(obj["provider_id"]), list(obj["keys"]), np.asarray(obj["weight"]))


# ---------------------------------------------------------------------------
# builders


def _context_vectors(tokens: Iterable[str], dim: int, seed: int, scale: float, pool_size: int = 32) -> dict[str, np.ndarray]:
    pool = [_seeded_unit(dim, "context-pool", seed, i) for i in range(pool_size)]
    return {t: scale * pool[stable_seed("pool-index", t) % pool_size] for t in tokens}


def semantic_provider(catalog: EnvironmentCatalog, dim: int = 64, seed: int = 0,
                      template: str = DEFAULT_TEMPLATE, spread: float = 0.5,
                      context_scale: float = 0.15) -> TokenProvider:
    """Language-model-like provider: environment words cluster around a group centroid.

    Each environment word gets ``unit(centroid[group] + spread * noise)``;
    offsets are orthogonal to the (orthonormal) centroids, so with
    ``spread=0.5`` same-group words sit near cosine 0.8 and cross-group words
    near 0. Template words come from a shared pool at
    ``context_scale`` norm so they do not swamp the environment signal.
    """
    if dim < 8:
        raise ConfigError(f"semantic provider needs dim >= 8, got {dim}")
    groups = sorted(set(catalog.group_of.values()))
    rng = np.random.default_rng(stable_seed("centroids", seed, dim))
    q, _ = np.linalg.qr(rng.standard_normal((dim, len(groups))))
    centroid = {g: q[:, i] for i, g in enumerate(groups)}

    def off_centroid(v):
        # offsets live in the complement of the centroid span, keeping cross-group cosines near zero
        return _unit(v - q @ (q.T @ v))

    table: dict[str, np.ndarray] = {}
    for env in catalog.all_environments:
        for word in tokenize(env):
            offset = off_centroid(_seeded_unit(dim, "word", seed, word))
            vec = _unit(centroid[catalog.group_of[env]] + spread * offset)
            if word in table and not np.allclose(table[word], vec):
                raise ValidationError(f"word {word!r} appears in environments of different groups")
            table[word] = vec
    ctx = [t for t in _template_tokens(template) if t not in table]
    table.update({t: context_scale * off_centroid(v) for t, v in _context_vectors(ctx, dim, seed, 1.0).items()})
    keys = list(table)
    return TokenProvider("semantic", keys, np.stack([table[k] for k in keys]))


def random_provider(catalog: EnvironmentCatalog, dim: int = 64, seed: int = 0,
                    template: str = DEFAULT_TEMPLATE, context_scale: float = 0.15) -> TokenProvider:
    """Structure-free control: independent random unit vectors per environment word."""
    table = {w: _seeded_unit(dim, "random-word", seed, w)
             for env in catalog.all_environments for w in tokenize(env)}
    ctx = [t for t in _template_tokens(template) if t not in table]
    table.update(_context_vectors(ctx, dim, seed, context_scale))
    keys = list(table)
    return TokenProvider("random", keys, np.stack([table[k] for k in keys]))


def log_band_spectrum(samples: np.ndarray, n_bands: int = 40, n_fft: int = 512) -> np.ndarray:
    """Mean log power in log-spaced bands between 50 Hz and Nyquist."""
    x = np.asarray(samples, dtype=np.float64)
    if x.size < n_fft:
        x = np.pad(x, (0, n_fft - x.size))
    hop = n_fft // 2
    n_frames = 1 + (x.size - n_fft) // hop
    frames = np.stack([x[i * hop:i * hop + n_fft] for i in range(n_frames)]) * np.hanning(n_fft)
    power = np.mean(np.abs(np.fft.rfft(frames, axis=1)) ** 2, axis=0)
    freqs = np.fft.rfftfreq(n_fft, 1 / SAMPLE_RATE)
    edges = np.geomspace(50.0, SAMPLE_RATE / 2, n_bands + 1)
    bands = np.empty(n_bands)
    for b in range(n_bands):
        sel = (freqs >= edges[b]) & (freqs < edges[b + 1])
        if not sel.any():
            sel = np.argmin(np.abs(freqs - np.sqrt(edges[b] * edges[b + 1])))
        bands[b] = np.mean(power[sel])
    return np.log10(bands + 1e-12)


def audio_grounded_provider(noise_clips: Sequence[NoiseClip], catalog: EnvironmentCatalog,
                            dim: int = 64, seed: int = 0, template: str = DEFAULT_TEMPLATE,
                            context_scale: float = 0.15, n_bands: int = 40) -> TokenProvider:
    """CLAP-like provider: a text key whose vector is derived from the environment's audio.

    Vector = unit(random projection of the environment's mean log-band
    spectrum, centred over environments).
    """
    if dim < 8:
        raise ConfigError(f"audio-grounded provider needs dim >= 8, got {dim}")
    spectra: dict[str, list[np.ndarray]] = {}
    for clip in noise_clips:
        spectra.setdefault(clip.environment, []).append(log_band_spectrum(clip.samples, n_bands))
    missing = [e for e in catalog.all_environments if e not in spectra]
    if missing:
        raise LookupFailure(f"no noise audio for environments {missing}")
    envs = catalog.all_environments
    mean_spec = np.stack([np.mean(spectra[e], axis=0) for e in envs])
    centred = mean_spec - mean_spec.mean(axis=0)
    proj = np.random.default_rng(stable_seed("projection", seed, dim, n_bands)).standard_normal((dim, n_bands))
    table: dict[str, np.ndarray] = {}
    for env, spec in zip(envs, centred):
        vec = _unit(proj @ spec)
        for word in tokenize(env):
            if word in table and not np.allclose(table[word], vec):
                raise ValidationError(f"word {word!r} shared by acoustically different environments")
            table[word] = vec
    ctx = [t for t in _template_tokens(template) if t not in table]
    table.update(_context_vectors(ctx, dim, seed, context_scale))
    keys = list(table)
    return TokenProvider("audio_grounded", keys, np.stack([table[k] for k in keys]))


def one_hot_provider(catalog: EnvironmentCatalog) -> OneHotProvider:
    return OneHotProvider(catalog.adapt_environments)


@dataclass
class EmbeddingTable:
    vectors: dict[str, np.ndarray]
    dim: int

    def __post_init__(self):
        for k, v in self.vectors.items():
            if np.asarray(v).shape != (self.dim,):
                raise ValidationError(f"table entry {k!r} has shape {np.asarray(v).shape}, expected ({self.dim},)")

    def __getitem__(self, key: str) -> np.ndarray:
        try:
            return self.vectors[key]
        except KeyError:
            raise LookupFailure(f"embedding table has no entry {key!r}") from None


def load_table(path: str | Path) -> EmbeddingTable:
    vectors = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        obj = json.loads(line)
        if "key" not in obj or "vector" not in obj:
            raise ValidationError(f"{path}:{lineno}: expected fields key and vector")
        vectors[str(obj["key"])] = np.asarray(obj["vector"], dtype=np.float64)
    if not vectors:
        raise ValidationError(f"{path}: empty embedding table")
    dims = {v.size for v in vectors.values()}
    if len(dims) != 1:
        raise ValidationError(f"{path}: mixed vector dimensions {sorted(dims)}")
    return EmbeddingTable(vectors, dims.pop())


def save_table(path: str | Path, table: EmbeddingTable) -> None:
    with Path(path).open("w") as fh:
        for k, v in table.vectors.items():
            fh.write(json.dumps({"key": k, "vector": [round(float(x), 6) for x in v]}) + "\n")


def make_wordvec_table(catalog: EnvironmentCatalog, dim: int = 300, seed: int = 7,
                       spread: float = 1.2) -> EmbeddingTable:
    """Word-vector table with weak group structure (co-occurrence-style vectors)."""
    groups = sorted(set(catalog.group_of.values()))
    rng = np.random.default_rng(stable_seed("glove-centroids", seed, dim))
    centroid = {g: _unit(rng.standard_normal(dim)) for g in groups}
    vectors = {}
    for env in catalog.all_environments:
        for word in tokenize(env):
            vectors[word] = _unit(centroid[catalog.group_of[env]] + spread * _seeded_unit(dim, "glove", seed, word))
    return EmbeddingTable(vectors, dim)


def default_table() -> EmbeddingTable:
    """The bundled 300-dim word-vector fixture."""
    ref = resources.files("tgeat") / "data" / "wordvec_300.jsonl"
    with resources.as_file(ref) as path:
        return load_table(path)


def table_provider(table: EmbeddingTable | None = None) -> TableProvider:
    table = table or default_table()
    keys = list(table.vectors)
    return TableProvider("table", keys, np.stack([table.vectors[k] for k in keys]))


def set_trainable(provider: EncoderProvider, flag: bool) -> EncoderProvider:
    if not provider.supports_training:
        raise UnsupportedError(f"provider {provider.provider_id!r} has no trainable parameters")
    provider.weight.requires_grad_(bool(flag))
    return provider


def build_provider(name: str, catalog: EnvironmentCatalog, noise_clips: Sequence[NoiseClip] = (),
                   dim: int = 64, seed: int = 0, template: str = DEFAULT_TEMPLATE,
                   table_path: str | None = None) -> EncoderProvider:
    if name == "semantic":
        return semantic_provider(catalog, dim, seed, template)
    if name == "audio_grounded":
        return audio_grounded_provider(noise_clips, catalog, dim, seed, template)
    if name == "one_hot":
        return one_hot_provider(catalog)
    if name == "table":
        return table_provider(load_table(table_path) if table_path else None)
    if name == "random":
        return random_provider(catalog, dim, seed, template)
    if name == "precomputed":
        if not table_path:
            raise ConfigError("precomputed provider needs a path")
        return load_precomputed(table_path)
    raise ConfigError(f"unknown provider {name!r}")


# ---------------------------------------------------------------------------
# precomputed-prompt files


def load_precomputed(path: str | Path) -> PrecomputedProvider:
    keys, vecs, ids, dims = [], [], set(), set()
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        obj = json.loads(line)
        for f in ("environment", "rendered", "vector", "provider_id", "dim"):
            if f not in obj:
                raise ValidationError(f"{path}:{lineno}: missing field {f!r}")
        if len(obj["vector"]) != int(obj["dim"]):
            raise ValidationError(f"{path}:{lineno}: vector length != dim")
        keys.append(obj["rendered"])
        vecs.append(obj["vector"])
        ids.add(obj["provider_id"])
        dims.add(int(obj["dim"]))
    if len(ids) != 1 or len(dims) != 1:
        raise ValidationError(f"{path}: expected one provider_id and one dim")
    return PrecomputedProvider(ids.pop(), keys, np.asarray(vecs, dtype=np.float64))


def dump_embeddings(provider: EncoderProvider, environments: Iterable[str], path: str | Path,
                    template: str = DEFAULT_TEMPLATE) -> int:
    """Write one precomputed-prompt record per environment; returns the record count."""
    n = 0
    with Path(path).open("w") as fh:
        for env in environments:
            prompt = render_prompt(env, template)
            emb = provider.embed(prompt)
            fh.write(json.dumps({"environment": env, "rendered": prompt.rendered,
                                 "vector": [float(x) for x in emb.vector],
                                 "provider_id": emb.provider, "dim": emb.dim}) + "\n")
            n += 1
    return n
