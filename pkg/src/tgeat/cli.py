"""Command-line entry point: ``tgeat synth|mix|train|eval|analyze|report|envtext``.

Everything that affects results lives in the JSON experiment config; flags
only pick paths, stages, verbosity and overwrite behaviour. All artifacts of
one experiment live under a single work directory::

    corpus/        WAVs, manifests, catalog
    eval_sets/     30 replicated test-set specs (JSONL)
    checkpoints/   one .npz per stage
    logs/          per-stage step/epoch logs
    reports/       per-stage EvalReport JSON
    analysis/      embedding differences and 2-D text-embedding exports
    meta/          run-metadata record per command
"""
from __future__ import annotations

import argparse
import json
import os
import shutil
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Optional

from . import __version__
from .corpus import Corpus, load_corpus, synth_corpus, write_corpus
from .envtext import DEFAULT_TEMPLATE, build_provider, dump_embeddings
from .errors import (ConfigError, DependencyError, LookupFailure, NumericError, TgeatError,
                     UnseenEnvironmentError, ZeroPowerError)
from .evaluation import EvalReport, evaluate, render_csv, render_table, write_embedding_export
from .mixer import achieved_snr, eval_set_filename, read_eval_set, write_eval_set
from .model import load_checkpoint, save_checkpoint
from .pipeline import ExperimentConfig, analysis_pairs, config_hash, make_eval_sets, make_provider, run_metadata
from .training import TrainData, run_stage

OUTPUT_ENV = "TGEAT_OUTPUT"
EXIT_OK, EXIT_CONFIG, EXIT_DEPENDENCY, EXIT_NUMERIC = 0, 2, 3, 4


class Workdir:
    def __init__(self, root: str | Path):
        self.root = Path(root)

    def __getattr__(self, name):
        if name in ("corpus", "eval_sets", "checkpoints", "logs", "reports", "analysis", "meta"):
            return self.root / name
        raise AttributeError(name)

    def checkpoint(self, stage_name: str) -> Path:
        return self.checkpoints / f"{stage_name}.npz"

    def report(self, stage_name: str) -> Path:
        return self.reports / f"{stage_name}.json"


# ---------------------------------------------------------------------------
# helpers


def load_config(path: Optional[str], seed: Optional[int]) -> ExperimentConfig:
    obj = {}
    if path:
        try:
            obj = json.loads(Path(path).read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    cfg = ExperimentConfig.from_json(obj)
    if seed is not None:
        cfg.seed = seed
    return cfg


def write_meta(wd: Workdir, command: str, cfg: ExperimentConfig, extra: Optional[dict] = None) -> None:
    wd.meta.mkdir(parents=True, exist_ok=True)
    rec = {"command": command, **run_metadata(cfg.to_json(), cfg.seed), **(extra or {})}
    (wd.meta / f"{command}.json").write_text(json.dumps(rec, indent=2, sort_keys=True) + "\n")


def require_corpus(wd: Workdir) -> Corpus:
    if not (wd.corpus / "utterances.jsonl").exists():
        raise DependencyError(f"no corpus under {wd.corpus}; run `tgeat synth` first")
    return load_corpus(wd.corpus)


def require_eval_sets(wd: Workdir):
    files = sorted(wd.eval_sets.glob("snr*.jsonl")) if wd.eval_sets.exists() else []
    if not files:
        raise DependencyError(f"no eval sets under {wd.eval_sets}; run `tgeat mix` first")
    return [read_eval_set(f) for f in files]


def select_stages(cfg: ExperimentConfig, names: Optional[list[str]]):
    if not names:
        return list(cfg.stages)
    by_name = {s.name: s for s in cfg.stages}
    missing = [n for n in names if n not in by_name]
    if missing:
        raise ConfigError(f"unknown stage(s) {missing}; config defines {sorted(by_name)}")
    return [s for s in cfg.stages if s.name in names]


def clean_stage_name(cfg: ExperimentConfig) -> str:
    return next(s.name for s in cfg.stages if s.stage == "clean_finetune")


def stage_hash(cfg: ExperimentConfig, stage) -> str:
    return config_hash({"experiment": cfg.content_hash(), "stage": stage.to_json()})


def require_checkpoint(wd: Workdir, name: str, why: str):
    path = wd.checkpoint(name)
    if not path.exists():
        raise DependencyError(f"{why}: missing checkpoint for stage {name!r} ({path}); "
                              f"run `tgeat train --stage {name}` first")
    return load_checkpoint(path)


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args, cfg: ExperimentConfig, wd: Workdir) -> int:
    out = wd.corpus
    if not wd.root.parent.exists():
        raise FileNotFoundError(f"parent directory does not exist: {wd.root.parent}")
    if out.exists() and any(out.iterdir()):
        if not args.force:
            raise ConfigError(f"{out} is not empty; pass --force to overwrite")
        shutil.rmtree(out)
    corpus = synth_corpus(cfg.synth, cfg.corpus_seed)
    write_corpus(out, corpus)
    counts = {s: len(corpus.split(s)) for s in ("train", "dev", "test")}
    write_meta(wd, "synth", cfg, {"counts": counts, "noise_clips": len(corpus.noises)})
    print(f"wrote {sum(counts.values())} utterances and {len(corpus.noises)} noise clips to {out}")
    return EXIT_OK


def cmd_mix(args, cfg: ExperimentConfig, wd: Workdir) -> int:
    corpus = require_corpus(wd)
    sets = make_eval_sets(cfg, corpus)
    if wd.eval_sets.exists():
        shutil.rmtree(wd.eval_sets)
    wd.eval_sets.mkdir(parents=True)
    for es in sets:
        write_eval_set(wd.eval_sets / eval_set_filename(es), es)
    worst = None
    if args.verify:
        utts = {u.id: u for u in corpus.utterances}
        noises = {n.id: n for n in corpus.noises}

        def check(es):
            return max(abs(achieved_snr(s, utts[s.utterance_id], noises[s.noise_id]) - es.snr_db) for s in es.specs)

        with ThreadPoolExecutor(max_workers=max(1, args.jobs)) as pool:
            worst = max(pool.map(check, sets))
        if worst > 0.01:
            raise NumericError(f"achieved SNR deviates from target by {worst:.4f} dB")
        print(f"verified {sum(len(s.specs) for s in sets)} mixtures; max SNR error {worst:.2e} dB")
    write_meta(wd, "mix", cfg, {"n_sets": len(sets)})
    print(f"wrote {len(sets)} eval sets to {wd.eval_sets}")
    return EXIT_OK


def cmd_train(args, cfg: ExperimentConfig, wd: Workdir) -> int:
    corpus = require_corpus(wd)
    data = TrainData.from_corpus(corpus)
    wd.checkpoints.mkdir(parents=True, exist_ok=True)
    wd.logs.mkdir(parents=True, exist_ok=True)
    clean_name = clean_stage_name(cfg)
    trained = []
    for stage in select_stages(cfg, args.stage):
        h = stage_hash(cfg, stage)
        ckpt = wd.checkpoint(stage.name)
        if args.resume and ckpt.exists():
            _, header, _ = load_checkpoint(ckpt)
            if header["meta"].get("stage_hash") != h:
                raise ConfigError(f"checksum mismatch for {ckpt}: it was trained with a different config; "
                                  "retrain without --resume")
            print(f"[{stage.name}] up to date, skipping")
            continue
        run_cfg = type(stage)(**{**stage.to_json(), "seed": cfg.stage_seed(stage)})
        provider = None
        if stage.stage == "clean_finetune":
            run = run_stage(run_cfg, data, cfg.model, log_every=args.log_every)
        else:
            base, _, _ = require_checkpoint(wd, clean_name, f"stage {stage.name} adapts the clean model")
            if stage.stage == "tgeat":
                provider = make_provider(cfg, stage, corpus)
            run = run_stage(run_cfg, data, init=base, provider=provider, log_every=args.log_every)
        meta = {"stage_hash": h, "best_epoch": run.best_epoch, "dev_ccc": run.epochs[run.best_epoch]["dev_ccc"],
                "template": stage.template}
        save_checkpoint(ckpt, run.model, stage.stage, meta, provider)
        run.write_log(wd.logs / f"{stage.name}.jsonl")
        trained.append(stage.name)
        print(f"[{stage.name}] best epoch {run.best_epoch} dev CCC "
              + " ".join(f"{v:.3f}" for v in meta["dev_ccc"]))
    write_meta(wd, "train", cfg, {"stages": trained})
    return EXIT_OK


def _load_stage_model(wd: Workdir, name: str):
    model, header, provider = require_checkpoint(wd, name, f"evaluating stage {name!r}")
    return model, provider, header["meta"].get("template", DEFAULT_TEMPLATE)


def cmd_eval(args, cfg: ExperimentConfig, wd: Workdir) -> int:
    corpus = require_corpus(wd)
    sets = require_eval_sets(wd)
    data = TrainData.from_corpus(corpus)
    utts = {u.id: u for u in corpus.utterances}
    noises = {n.id: n for n in corpus.noises}
    wd.reports.mkdir(parents=True, exist_ok=True)
    for stage in select_stages(cfg, args.stage):
        model, provider, template = _load_stage_model(wd, stage.name)
        chunks = [sets[i::args.jobs] for i in range(max(1, args.jobs))]

        def run(chunk, model=model, provider=provider, template=template, name=stage.name):
            return evaluate(model, chunk, utts, noises, data.stats, provider, model_id=name, template=template)

        with ThreadPoolExecutor(max_workers=len(chunks)) as pool:
            parts = list(pool.map(run, [c for c in chunks if c]))
        rep = parts[0]
        for part in parts[1:]:
            rep.per_set.update(part.per_set)
        rep.per_set = dict(sorted(rep.per_set.items()))
        rep.validate(cfg.eval_replications)
        wd.report(stage.name).write_text(json.dumps(rep.to_json(), indent=1, sort_keys=True) + "\n")
        print(f"[{stage.name}] " + "  ".join(f"{snr:+g}dB " + "/".join(f"{v:.3f}" for v in m)
                                             for snr, m in rep.means.items()))
    write_meta(wd, "eval", cfg)
    return EXIT_OK


def cmd_analyze(args, cfg: ExperimentConfig, wd: Workdir) -> int:
    from .evaluation import embedding_difference

    corpus = require_corpus(wd)
    data = TrainData.from_corpus(corpus)
    clean, noisy, envs = analysis_pairs(cfg, data)
    clean_name = clean_stage_name(cfg)
    original, _, _ = require_checkpoint(wd, clean_name, "analysis compares against the clean model")
    layers = ["first", "last"] + (list(range(1, cfg.model.n_layers + 1)) if args.all_layers else [])
    records = []
    wd.analysis.mkdir(parents=True, exist_ok=True)
    for stage in select_stages(cfg, args.stage):
        model, provider, template = _load_stage_model(wd, stage.name)
        for layer in layers:
            for mode in ("same_model", "vs_original"):
                rec = embedding_difference(model, clean, noisy, layer=layer, mode=mode, original=original,
                                           environments=envs, provider=provider, template=template)
                records.append({"stage": stage.name, "layer": rec.layer, "mode": rec.mode, "value": rec.value})
        if provider is not None:
            write_embedding_export(wd.analysis, provider, corpus.catalog, template)
    (wd.analysis / "embedding_differences.json").write_text(json.dumps(records, indent=1) + "\n")
    for r in records:
        print(f"{r['stage']:<24} {r['layer']:>5} {r['mode']:<12} {r['value']:.5f}")
    write_meta(wd, "analyze", cfg)
    return EXIT_OK


def cmd_report(args, cfg: ExperimentConfig, wd: Workdir) -> int:
    reports = {}
    for stage in select_stages(cfg, args.stage):
        path = wd.report(stage.name)
        if not path.exists():
            raise DependencyError(f"missing eval report for stage {stage.name!r}; run `tgeat eval` first")
        reports[stage.name] = EvalReport.from_json(json.loads(path.read_text()))
    table = render_table(reports)
    (wd.root / "report.txt").write_text(table)
    (wd.root / "report.csv").write_text(render_csv(reports))
    print(table, end="")
    write_meta(wd, "report", cfg)
    return EXIT_OK


def cmd_envtext(args, cfg: ExperimentConfig, wd: Workdir) -> int:
    if args.action != "dump":
        raise ConfigError(f"unknown envtext action {args.action!r}")
    corpus = require_corpus(wd)
    provider = build_provider(args.provider, corpus.catalog, corpus.noises, dim=cfg.provider_dim,
                              seed=cfg.provider_seed, template=cfg.template, table_path=cfg.table_path)
    envs = corpus.catalog.adapt_environments if args.provider == "one_hot" else corpus.catalog.all_environments
    out = Path(args.output) if args.output else wd.analysis / f"prompts_{args.provider}.jsonl"
    out.parent.mkdir(parents=True, exist_ok=True)
    n = dump_embeddings(provider, envs, out, cfg.template)
    print(f"wrote {n} embeddings to {out}")
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "mix": cmd_mix, "train": cmd_train, "eval": cmd_eval,
            "analyze": cmd_analyze, "report": cmd_report, "envtext": cmd_envtext}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tgeat", description="Text-guided environment-aware SER experiments")
    p.add_argument("--version", action="version", version=f"tgeat {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config (JSON); defaults apply when omitted")
    common.add_argument("--workdir", default=None,
                        help=f"experiment directory (default: ${OUTPUT_ENV} or ./tgeat_runs)")
    common.add_argument("--seed", type=int, default=None, help="override the config seed")
    common.add_argument("-q", "--quiet", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="generate the synthetic corpus")
    s.add_argument("--force", action="store_true", help="overwrite a non-empty corpus directory")

    s = sub.add_parser("mix", parents=[common], help="build the replicated noisy eval sets")
    s.add_argument("--verify", action="store_true", help="recompute achieved SNR of every mixture")
    s.add_argument("--jobs", type=int, default=1)

    s = sub.add_parser("train", parents=[common], help="train stages in config order")
    s.add_argument("--stage", action="append", help="stage name (repeatable); default all")
    s.add_argument("--resume", action="store_true", help="skip stages whose checkpoint matches the config")
    s.add_argument("--log-every", type=int, default=0)

    for name, text in (("eval", "evaluate checkpoints on the eval sets"),
                       ("analyze", "embedding-difference analysis and text-embedding export"),
                       ("report", "render the comparison table")):
        s = sub.add_parser(name, parents=[common], help=text)
        s.add_argument("--stage", action="append")
        if name == "eval":
            s.add_argument("--jobs", type=int, default=1)
        if name == "analyze":
            s.add_argument("--all-layers", action="store_true", help="also report every intermediate layer")

    s = sub.add_parser("envtext", parents=[common], help="environment-text utilities")
    s.add_argument("action", choices=["dump"])
    s.add_argument("--provider", required=True)
    s.add_argument("--output")
    return p


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, (NumericError, ZeroPowerError, FloatingPointError)):
        return EXIT_NUMERIC
    if isinstance(exc, (DependencyError, UnseenEnvironmentError, LookupFailure)):
        return EXIT_DEPENDENCY
    return EXIT_CONFIG


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    root = args.workdir or os.environ.get(OUTPUT_ENV) or "tgeat_runs"
    wd = Workdir(root)
    try:
        cfg = load_config(args.config, args.seed)
        if args.quiet:
            sys.stdout = open(os.devnull, "w")
        return COMMANDS[args.command](args, cfg, wd)
    except (TgeatError, OSError) as exc:
        print(f"tgeat {args.command}: error: {exc}", file=sys.stderr)
        return exit_code_for(exc)
    finally:
        if args.quiet and sys.stdout is not sys.__stdout__:
            sys.stdout.close()
            sys.stdout = sys.__stdout__


if __name__ == "__main__":
    sys.exit(main())
