"""Command-line pipeline.

One JSON run-config file drives every command; flags override the output
directory, seed, and sizes.  Commands write plain JSON/JSONL reports into
the output directory and are byte-identical on re-runs with the same
inputs; the wall-clock timestamp lives only in manifest.json.

Config layout (all paths relative to the config file's directory):

    {
      "seed": 0,                  global seed, fans out per command
      "out_dir": "runs/demo",
      "schema": "schema.json",    CorpusSchema as JSON
      "corpora": {"train": ..., "val": ..., "test": ...,
                  "synthetic": ..., "complete_input": ...},
      "model": { ModelConfig fields },
      "train": { TrainConfig fields, "corruption": { CorruptionConfig } },
      "generation": { GenerationConfig fields },
      "completion": {"default": {"kind": ..., "fraction": ...},
                     "overrides": [{"visit": t, "modality": m,
                                    "kind": ..., "fraction": ...}]},
      "evaluate": {"n_resamples": 1000},
      "attack": {"shadow_train": {...}, "shadow_model": {...},
                 "mi": {"epochs": ..., "hidden": ..., "learning_rate": ...},
                 "imputer_train": {...}, "imputer_model": {...},
                 "delta_grid": [...], "hide_fraction": 0.2},
      "utility": {"arms": [{"n_syn": ..., "n_real": ...}], "ks": [10, 20],
                  "n_resamples": 1000, "predictor": {...}},
      "oracle": { OracleSpec fields, "n": 100 }
    }
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys
import time
from typing import Optional

from .corruption import CorruptionConfig
from .errors import ConfigError, DataError, EhrSynthError
from .generate import (
    CompletionAction,
    CompletionPolicy,
    GenerationConfig,
    complete_record,
    generate_corpus,
    sample_baselines,
)
from .metrics import evaluate_corpus
from .model import (
    EncDecModel,
    ModelConfig,
    TrainConfig,
    load_checkpoint,
    save_checkpoint,
    train,
)
from .privacy import (
    build_mi_dataset,
    run_attribute_attack,
    run_membership_attack,
    subsample_corpus,
    train_shadow,
)
from .records import (
    BaselineEffect,
    Corpus,
    CouplingRule,
    OracleSpec,
    corpus_stats,
    generate_oracle_corpus,
    load_corpus,
    load_schema,
    write_corpus,
)
from .seeding import derive_seed
from .utility import PredictorConfig, UtilityArm, UtilityConfig, run_utility_suite

_REQUIRED = object()


# ---------------------------------------------------------------------------
# config plumbing
# ---------------------------------------------------------------------------


def _cfg(config: dict, dotted: str, default=_REQUIRED):
    node = config
    for part in dotted.split("."):
        if not isinstance(node, dict) or part not in node:
            if default is _REQUIRED:
                raise ConfigError(f"config field {dotted!r} is required")
            return default
        node = node[part]
    return node


def _build(cls, obj: dict, field_path: str):
    """Construct a config dataclass, naming the config field on failure."""
    if not isinstance(obj, dict):
        raise ConfigError(f"{field_path}: expected an object")
    try:
        return cls(**obj)
    except TypeError as exc:
        raise ConfigError(f"{field_path}: {exc}") from exc
    except ConfigError as exc:
        raise ConfigError(f"{field_path}: {exc}") from exc


def _resolve(base_dir: str, path: str) -> str:
    return path if os.path.isabs(path) else os.path.normpath(os.path.join(base_dir, path))


def _input_file(config: dict, base_dir: str, dotted: str, default=_REQUIRED) -> str:
    path = _cfg(config, dotted, default)
    if path is default and default is not _REQUIRED:
        return path
    resolved = _resolve(base_dir, path)
    if not os.path.isfile(resolved):
        raise ConfigError(f"config field {dotted!r}: no such file: {resolved}")
    return resolved


def _load_run_config(path: str) -> tuple[dict, str]:
    if not os.path.isfile(path):
        raise ConfigError(f"--config: no such file: {path}")
    with open(path, "r", encoding="utf-8") as fh:
        try:
            config = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"--config {path}: invalid JSON: {exc.msg}") from exc
    if not isinstance(config, dict):
        raise ConfigError(f"--config {path}: top level must be an object")
    return config, os.path.dirname(os.path.abspath(path))


def _train_config(config: dict, key: str, default_seed: int) -> TrainConfig:
    obj = dict(_cfg(config, key, {}))
    corruption = obj.pop("corruption", None)
    if corruption is not None:
        obj["corruption"] = _build(CorruptionConfig, corruption, f"{key}.corruption")
    obj.setdefault("seed", default_seed)
    return _build(TrainConfig, obj, key)


def _model_config(config: dict, key: str) -> Optional[ModelConfig]:
    obj = _cfg(config, key, None)
    if obj is None:
        return None
    return _build(ModelConfig, obj, key)


def _generation_config(config: dict, default_seed: int) -> GenerationConfig:
    obj = dict(_cfg(config, "generation", {}))
    obj.setdefault("seed", default_seed)
    return _build(GenerationConfig, obj, "generation")


def _load_corpus_field(config: dict, base_dir: str, dotted: str, schema) -> Corpus:
    return load_corpus(_input_file(config, base_dir, dotted), schema)


def _schema(config: dict, base_dir: str):
    return load_schema(_input_file(config, base_dir, "schema"))


def _checked_model(args, config: dict, base_dir: str) -> EncDecModel:
    if not args.checkpoint:
        raise ConfigError("--checkpoint is required for this command")
    if not os.path.isfile(args.checkpoint):
        raise ConfigError(f"--checkpoint: no such file: {args.checkpoint}")
    model = load_checkpoint(args.checkpoint)
    schema = _schema(config, base_dir)
    if model.schema.digest() != schema.digest():
        raise DataError(
            "schema hash mismatch: checkpoint has "
            f"{model.schema.digest()[:12]}, config schema has {schema.digest()[:12]}"
        )
    return model


def _delta_grid(raw) -> list[float]:
    if not isinstance(raw, list) or not raw:
        raise ConfigError("config field 'attack.delta_grid' must be a nonempty list")
    try:
        return [float(x) for x in raw]  # accepts "inf"/"-inf" strings too
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"attack.delta_grid: {exc}") from exc


# ---------------------------------------------------------------------------
# output plumbing
# ---------------------------------------------------------------------------


def _write_json(path: str, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _config_digest(config: dict, seed: int) -> str:
    blob = json.dumps({"config": config, "seed": seed}, sort_keys=True, default=str)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def _finish(out_dir: str, command: str, config: dict, seed: int, outputs: list[str]) -> None:
    """manifest.json is the only file allowed to differ between re-runs."""
    _write_json(
        os.path.join(out_dir, "manifest.json"),
        {
            "command": command,
            "created_at": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
            "config_digest": _config_digest(config, seed),
            "seed": seed,
            "outputs": sorted(outputs),
        },
    )


def _out_dir(args, config: dict, base_dir: str) -> str:
    out = args.out or _cfg(config, "out_dir", None)
    if out is None:
        raise ConfigError("config field 'out_dir' is required (or pass --out)")
    out = _resolve(base_dir, out) if args.out is None else args.out
    os.makedirs(out, exist_ok=True)
    return out


def _global_seed(args, config: dict) -> int:
    if args.seed is not None:
        return args.seed
    seed = _cfg(config, "seed", 0)
    if not isinstance(seed, int):
        raise ConfigError("config field 'seed' must be an integer")
    return seed


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_train(args) -> int:
    config, base_dir = _load_run_config(args.config)
    out_dir = _out_dir(args, config, base_dir)
    seed = _global_seed(args, config)
    schema = _schema(config, base_dir)
    train_corpus = _load_corpus_field(config, base_dir, "corpora.train", schema)
    val_corpus = _load_corpus_field(config, base_dir, "corpora.val", schema)
    train_config = _train_config(config, "train", derive_seed(seed, "train"))
    model_config = _model_config(config, "model")

    model, log = train(train_corpus, val_corpus, train_config, model_config=model_config)
    checkpoint_path = os.path.join(out_dir, "checkpoint.pt")
    save_checkpoint(model, checkpoint_path)
    _write_json(os.path.join(out_dir, "train_log.json"), log)
    _finish(out_dir, "train", config, seed, ["checkpoint.pt", "train_log.json"])
    print(checkpoint_path)
    return 0


def cmd_generate(args) -> int:
    config, base_dir = _load_run_config(args.config)
    out_dir = _out_dir(args, config, base_dir)
    seed = _global_seed(args, config)
    model = _checked_model(args, config, base_dir)
    gen_config = _generation_config(config, derive_seed(seed, "generate"))
    schema = model.schema

    if args.mode == "scratch":
        demographics = _load_corpus_field(config, base_dir, "corpora.train", schema)
        baselines = sample_baselines(demographics, args.n, gen_config.seed)
        corpus = generate_corpus(model, baselines, gen_config)
        provenance = {
            "mode": "scratch",
            "n": args.n,
            "generation": dataclasses.asdict(gen_config),
            "record_ids": [r.id for r in corpus.records],
        }
    else:
        source = _load_corpus_field(config, base_dir, "corpora.complete_input", schema)
        policy = _completion_policy(config, derive_seed(seed, "completion"))
        completed, slots = [], []
        for record in source.records:
            new_record, info = complete_record(model, record, policy, gen_config)
            completed.append(new_record)
            slots.append(info)
        corpus = Corpus(schema=schema, records=completed)
        provenance = {
            "mode": "complete",
            "generation": dataclasses.asdict(gen_config),
            "records": slots,
        }

    corpus_path = os.path.join(out_dir, "synthetic.jsonl")
    write_corpus(corpus, corpus_path)
    _write_json(os.path.join(out_dir, "generation_provenance.json"), provenance)
    _finish(out_dir, "generate", config, seed, ["synthetic.jsonl", "generation_provenance.json"])
    print(corpus_path)
    return 0


def _completion_policy(config: dict, default_seed: int) -> CompletionPolicy:
    obj = _cfg(config, "completion", {})
    default_action = _build(
        CompletionAction, obj.get("default", {"kind": "keep_all"}), "completion.default"
    )
    overrides = {}
    for i, entry in enumerate(obj.get("overrides", [])):
        entry = dict(entry)
        try:
            visit = int(entry.pop("visit"))
            mod = str(entry.pop("modality"))
        except KeyError as exc:
            raise ConfigError(f"completion.overrides[{i}]: missing {exc}") from exc
        overrides[(visit, mod)] = _build(CompletionAction, entry, f"completion.overrides[{i}]")
    return CompletionPolicy(
        default=default_action, overrides=overrides, seed=obj.get("seed", default_seed)
    )


def cmd_evaluate(args) -> int:
    config, base_dir = _load_run_config(args.config)
    out_dir = _out_dir(args, config, base_dir)
    seed = _global_seed(args, config)
    model = _checked_model(args, config, base_dir)
    corpus = _load_corpus_field(config, base_dir, "corpora.test", model.schema)
    report = evaluate_corpus(
        model,
        corpus,
        seed=derive_seed(seed, "evaluate"),
        n_resamples=int(_cfg(config, "evaluate.n_resamples", 1000)),
    )
    _write_json(os.path.join(out_dir, "perplexity_report.json"), report.to_dict())
    _finish(out_dir, "evaluate", config, seed, ["perplexity_report.json"])
    for mod, agg in sorted(report.aggregate.items()):
        ci = report.ci95[mod]
        parts = ", ".join(
            f"{name} {agg[name]:.4f} ± {ci[name]:.4f}" for name in sorted(agg)
        )
        print(f"{mod}: {parts}")
    return 0


def _synthetic_corpus(args, config: dict, base_dir: str, model, schema, n: int, seed: int) -> Corpus:
    """Use the configured synthetic corpus when given, else generate one."""
    path = _cfg(config, "corpora.synthetic", None)
    if path is not None:
        return _load_corpus_field(config, base_dir, "corpora.synthetic", schema)
    gen_config = _generation_config(config, seed)
    demographics = _load_corpus_field(config, base_dir, "corpora.train", schema)
    baselines = sample_baselines(demographics, n, gen_config.seed)
    return generate_corpus(model, baselines, gen_config)


def cmd_attack_mi(args) -> int:
    config, base_dir = _load_run_config(args.config)
    out_dir = _out_dir(args, config, base_dir)
    seed = _global_seed(args, config)
    model = _checked_model(args, config, base_dir)
    schema = model.schema
    members = _load_corpus_field(config, base_dir, "corpora.train", schema)
    nonmembers = _load_corpus_field(config, base_dir, "corpora.test", schema)
    synthetic = _synthetic_corpus(
        args, config, base_dir, model, schema,
        n=len(members.records), seed=derive_seed(seed, "attack-mi-generate"),
    )

    shadow_train = _train_config(
        config, "attack.shadow_train", derive_seed(seed, "attack-mi-shadow")
    )
    shadow = train_shadow(synthetic, shadow_train, _model_config(config, "attack.shadow_model"))
    in_set = subsample_corpus(
        synthetic, len(nonmembers.records), derive_seed(seed, "attack-mi-subset")
    )
    table = build_mi_dataset(shadow, in_set, nonmembers)
    mi_options = _cfg(config, "attack.mi", {})
    result = run_membership_attack(
        table,
        members,
        nonmembers,
        seed=derive_seed(seed, "attack-mi-classifier"),
        epochs=int(mi_options.get("epochs", 300)),
        hidden=int(mi_options.get("hidden", 32)),
        learning_rate=float(mi_options.get("learning_rate", 1e-2)),
    )
    _write_json(os.path.join(out_dir, "membership_report.json"), result.to_dict())
    _finish(out_dir, "attack-mi", config, seed, ["membership_report.json"])
    print(f"membership AUC: {result.auc:.4f} over {len(result.scores)} records")
    return 0


def cmd_attack_ai(args) -> int:
    config, base_dir = _load_run_config(args.config)
    out_dir = _out_dir(args, config, base_dir)
    seed = _global_seed(args, config)
    model = _checked_model(args, config, base_dir)
    schema = model.schema
    train_real = _load_corpus_field(config, base_dir, "corpora.train", schema)
    test_real = _load_corpus_field(config, base_dir, "corpora.test", schema)
    synthetic = _synthetic_corpus(
        args, config, base_dir, model, schema,
        n=len(train_real.records), seed=derive_seed(seed, "attack-ai-generate"),
    )

    result = run_attribute_attack(
        synthetic,
        train_real,
        test_real,
        _delta_grid(_cfg(config, "attack.delta_grid")),
        hide_fraction=float(_cfg(config, "attack.hide_fraction", 0.2)),
        seed=derive_seed(seed, "attack-ai"),
        train_config=_train_config(
            config, "attack.imputer_train", derive_seed(seed, "attack-ai-imputer")
        ),
        model_config=_model_config(config, "attack.imputer_model"),
    )
    _write_json(os.path.join(out_dir, "attribute_report.json"), result.to_dict())
    _finish(out_dir, "attack-ai", config, seed, ["attribute_report.json"])
    print("delta  treat_tpr  treat_fpr  ctrl_tpr  ctrl_fpr")
    for delta, (t_tpr, t_fpr), (c_tpr, c_fpr) in zip(
        result.delta_grid, result.treatment, result.control
    ):
        print(f"{delta:+.3f}  {t_tpr:.4f}  {t_fpr:.4f}  {c_tpr:.4f}  {c_fpr:.4f}")
    return 0


def cmd_utility(args) -> int:
    config, base_dir = _load_run_config(args.config)
    out_dir = _out_dir(args, config, base_dir)
    seed = _global_seed(args, config)
    arms = [
        _build(UtilityArm, arm, f"utility.arms[{i}]")
        for i, arm in enumerate(_cfg(config, "utility.arms"))
    ]
    model = None
    if any(arm.n_syn > 0 for arm in arms):
        model = _checked_model(args, config, base_dir)
        schema = model.schema
    else:
        schema = _schema(config, base_dir)
    train_real = _load_corpus_field(config, base_dir, "corpora.train", schema)
    test_real = _load_corpus_field(config, base_dir, "corpora.test", schema)

    utility_config = UtilityConfig(
        ks=tuple(int(k) for k in _cfg(config, "utility.ks", [10, 20])),
        seed=derive_seed(seed, "utility"),
        n_resamples=int(_cfg(config, "utility.n_resamples", 1000)),
        predictor=_build(
            PredictorConfig, _cfg(config, "utility.predictor", {}), "utility.predictor"
        ),
        generation=_generation_config(config, derive_seed(seed, "utility-generate")),
    )
    results = run_utility_suite(model, train_real, test_real, arms, utility_config)
    _write_json(os.path.join(out_dir, "utility_report.json"), [r.to_dict() for r in results])
    _finish(out_dir, "utility", config, seed, ["utility_report.json"])
    for result in results:
        cells = "  ".join(
            f"recall@{r.k} {r.recall:.4f} ± {r.ci95:.4f}" for r in result.recalls
        )
        print(f"{result.arm} (n={result.n_train}): {cells}")
    return 0


def cmd_oracle_corpus(args) -> int:
    config, base_dir = _load_run_config(args.config)
    out_dir = _out_dir(args, config, base_dir)
    seed = _global_seed(args, config)
    obj = dict(_cfg(config, "oracle"))
    n = args.n if args.n is not None else int(obj.pop("n", 100))
    obj.pop("n", None)
    couplings = obj.pop("couplings", [])
    effects = obj.pop("baseline_effects", [])
    obj["couplings"] = [
        _build(CouplingRule, c, f"oracle.couplings[{i}]") for i, c in enumerate(couplings)
    ]
    obj["baseline_effects"] = [
        _build(BaselineEffect, e, f"oracle.baseline_effects[{i}]") for i, e in enumerate(effects)
    ]
    obj.setdefault("seed", derive_seed(seed, "oracle"))
    spec = _build(OracleSpec, obj, "oracle")

    corpus = generate_oracle_corpus(spec, n)
    corpus_path = os.path.join(out_dir, "oracle_corpus.jsonl")
    write_corpus(corpus, corpus_path)
    _write_json(os.path.join(out_dir, "schema.json"), spec.schema().to_dict())
    _write_json(os.path.join(out_dir, "corpus_stats.json"), corpus_stats(corpus))
    _finish(
        out_dir, "oracle-corpus", config, seed,
        ["oracle_corpus.jsonl", "schema.json", "corpus_stats.json"],
    )
    print(corpus_path)
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ehrsynth",
        description="Generate and evaluate synthetic longitudinal patient records.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text, checkpoint=False, n=_REQUIRED, mode=False):
        cmd = sub.add_parser(name, help=help_text)
        cmd.add_argument("--config", required=True, help="run-config JSON file")
        cmd.add_argument("--out", default=None, help="output directory (overrides config)")
        cmd.add_argument("--seed", type=int, default=None, help="global seed (overrides config)")
        if checkpoint:
            cmd.add_argument("--checkpoint", default=None, help="model checkpoint path")
        if n is not _REQUIRED:
            cmd.add_argument("--n", type=int, default=n, help="number of records")
        if mode:
            cmd.add_argument(
                "--mode", choices=("scratch", "complete"), default="scratch",
                help="generate new records or complete an input corpus",
            )
        cmd.set_defaults(func=func)
        return cmd

    add("train", cmd_train, "fit the generator and write a checkpoint")
    add("generate", cmd_generate, "sample records from a checkpoint",
        checkpoint=True, n=10, mode=True)
    add("evaluate", cmd_evaluate, "structure-aware perplexity report", checkpoint=True)
    add("attack-mi", cmd_attack_mi, "membership-inference attack report", checkpoint=True)
    add("attack-ai", cmd_attack_ai, "attribute-inference attack report", checkpoint=True)
    add("utility", cmd_utility, "next-visit prediction utility arms", checkpoint=True)
    add("oracle-corpus", cmd_oracle_corpus, "draw a corpus from the oracle process", n=None)
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except EhrSynthError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return getattr(exc, "exit_code", 1)


if __name__ == "__main__":
    sys.exit(main())
