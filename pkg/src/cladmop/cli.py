"""Command-line entry point.

Subcommands cover the full workflow: ``build-dataset`` constructs the
success-labeled corpus, ``pretrain``/``finetune`` train the two stages,
``eval`` scores a test set (full and new-disease subsets, bootstrapped),
``gradcheck`` runs the finite-difference suite, ``bench`` tabulates
attention op counts over criteria lengths. Every artifact embeds the
resolved config hash and master seed, and equal (config, seed, inputs)
reruns produce byte-identical artifacts.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, max_threads
from .criteria import EmbeddingStore, StoreCriteriaEncoder, ToyCriteriaEncoder
from .data_pipeline import (
    CorpusStats,
    DrugEntityIndex,
    build_sct,
    leakage_check,
    load_trials,
    new_disease_subset,
    save_trials,
    temporal_split,
)
from .dm_branch import ArchConfig, count_attention_ops
from .encoders import IcdTree, SmilesSegmentDict
from .metrics import ScoredExample, bootstrap_eval
from .model import TrialOutcomeModel
from .numerics import finite_diff_check
from .peft import FinetuneConfig, predict, setup_finetune, train_finetune
from .pretrain import PretrainConfig, train_pretrain

LORA_SITE_FLAGS = {"none": "none", "cross": "cross_only", "self": "self_only",
                   "both": "both"}


class CommandError(RuntimeError):
    pass


def _require_file(parser, path, what):
    if path is None:
        parser.error(f"missing required {what}")
    if not os.path.exists(path):
        parser.error(f"{what} not found: {path}")
    return path


def _stamp(cfg: RunConfig) -> str:
    return f"# config_hash={cfg.hash_hex()} seed={cfg.get('seed')}"


def _write_lines(path, lines):
    with open(path, "w", encoding="utf-8") as fh:
        for line in lines:
            fh.write(line + "\n")


def _arch_from_config(cfg: RunConfig) -> ArchConfig:
    return ArchConfig(
        d_dm=cfg.get_int("arch.d_dm"),
        num_heads=cfg.get_int("arch.num_heads"),
        d_mol=cfg.get_int("arch.d_mol"),
        enrich_layers=cfg.get_int("arch.enrich_layers"),
        grouping_layers=cfg.get_int("arch.grouping_layers"),
        self_layers=cfg.get_int("arch.self_layers"),
        final_centroids=cfg.get_int("arch.final_centroids"),
        max_molecules=cfg.get_int("arch.max_molecules"),
        head_hidden=cfg.get_int("arch.head_hidden"),
    )


def _build_model(cfg: RunConfig, parser) -> TrialOutcomeModel:
    tree_path = cfg.get("data.icd_tree")
    _require_file(parser, tree_path or None, "--icd-tree file")
    tree = IcdTree.from_file(tree_path)
    seed = cfg.get_int("seed")
    seg_path = cfg.get("data.seg_dict")
    if seg_path:
        _require_file(parser, seg_path, "--seg-dict file")
        seg = SmilesSegmentDict.from_file(seg_path)
    else:
        seg = SmilesSegmentDict.hash_fallback(d_mol=cfg.get_int("arch.d_mol"),
                                              seed=seed)
    kind = cfg.get("encoder.kind")
    if kind == "toy":
        encoder = ToyCriteriaEncoder(seed=seed, d_llm=cfg.get_int("encoder.d_llm"))
    elif kind == "store":
        store_path = cfg.get("encoder.store")
        _require_file(parser, store_path or None, "--store file")
        encoder = StoreCriteriaEncoder(EmbeddingStore(store_path))
    else:
        parser.error(f"unknown encoder kind {kind!r}")
    return TrialOutcomeModel.build(_arch_from_config(cfg), seg, tree, encoder,
                                   seed=seed, tau=cfg.get_float("pretrain.tau"))


def _write_meta(path, cfg: RunConfig, stage: str, extra: dict | None = None):
    payload = {
        "stage": stage,
        "seed": cfg.get_int("seed"),
        "config_hash": cfg.hash_hex(),
        "config": cfg.values,
    }
    payload.update(extra or {})
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(payload, sort_keys=True, indent=2) + "\n")


def _load_meta_config(ckpt_path, overrides: dict[str, str]) -> RunConfig:
    """Rebuild the run config from a checkpoint's sidecar, flags winning."""
    meta_path = str(ckpt_path) + ".meta.json"
    merged: dict[str, str] = {}
    if os.path.exists(meta_path):
        with open(meta_path, encoding="utf-8") as fh:
            merged.update(json.load(fh)["config"])
    for key, value in overrides.items():
        if value is not None:
            merged[key] = str(value)
    return RunConfig(merged)


# ---------------------------------------------------------------------------
# subcommands


def cmd_build_dataset(args, parser) -> int:
    cfg = RunConfig.resolve(args.config, {"seed": args.seed})
    _require_file(parser, args.data, "--data trial file")
    _require_file(parser, args.synonyms, "--synonyms file")
    _require_file(parser, args.marketed, "--marketed file")
    os.makedirs(args.out, exist_ok=True)
    trials = load_trials(args.data)
    index = DrugEntityIndex.from_files(args.synonyms, args.marketed)
    result = build_sct(trials, index)
    save_trials(os.path.join(args.out, "sct.jsonl"), result.records)
    result.write_exclusions(os.path.join(args.out, "exclusions.csv"))
    stats = CorpusStats.compute(result.records)
    _write_lines(os.path.join(args.out, "stats.tsv"),
                 [_stamp(cfg)] + stats.lines())
    if args.cut_date:
        split = temporal_split(result.records, args.cut_date,
                               cfg.get_int("seed"))
        save_trials(os.path.join(args.out, "sct_train.jsonl"), split.train)
        save_trials(os.path.join(args.out, "sct_val.jsonl"), split.validation)
        save_trials(os.path.join(args.out, "sct_test.jsonl"), split.test)
        leak = leakage_check(split.train + split.validation, split.test)
        if not leak.passed:
            raise CommandError(f"split leaked ids: {leak.shared_ids}")
        print(f"split train={len(split.train)} val={len(split.validation)} "
              f"test={len(split.test)}")
    for line in stats.lines():
        print(line)
    print(f"labeled={len(result.records)} excluded={len(result.exclusions)}")
    return 0


def cmd_pretrain(args, parser) -> int:
    overrides = {
        "seed": args.seed,
        "encoder.kind": args.encoder,
        "encoder.store": args.store,
        "data.icd_tree": args.icd_tree,
        "data.seg_dict": args.seg_dict,
        "pretrain.epochs": args.epochs,
        "pretrain.batch_size": args.batch_size,
        "pretrain.learning_rate": args.learning_rate,
    }
    cfg = RunConfig.resolve(args.config, overrides)
    _require_file(parser, args.data, "--data trial file")
    os.makedirs(args.out, exist_ok=True)
    trials = load_trials(args.data)
    model = _build_model(cfg, parser)
    pretrain_cfg = PretrainConfig(
        batch_size=cfg.get_int("pretrain.batch_size"),
        learning_rate=cfg.get_float("pretrain.learning_rate"),
        tau=cfg.get_float("pretrain.tau"),
        epochs=cfg.get_int("pretrain.epochs"),
        seed=cfg.get_int("seed"),
        val_fraction=cfg.get_float("pretrain.val_fraction"),
    )
    result = train_pretrain(model, trials, pretrain_cfg)
    ckpt = os.path.join(args.out, "pretrain.ckpt")
    save_checkpoint(ckpt, model.state(), cfg.hash_bytes())
    _write_meta(ckpt + ".meta.json", cfg, "pretrain",
                {"best_epoch": result.best_epoch, "d_llm": model.d_llm})
    _write_lines(os.path.join(args.out, "pretrain_loss.csv"),
                 [_stamp(cfg)] + result.curve_rows())
    print(f"checkpoint={ckpt} best_epoch={result.best_epoch} "
          f"best_val_loss={result.best_val_loss:.6f}")
    return 0


def cmd_finetune(args, parser) -> int:
    _require_file(parser, args.pretrained, "--pretrained checkpoint")
    _require_file(parser, args.data, "--data trial file")
    overrides = {
        "seed": args.seed,
        "data.icd_tree": args.icd_tree,
        "data.seg_dict": args.seg_dict,
        "encoder.kind": args.encoder,
        "encoder.store": args.store,
        "finetune.epochs": args.epochs,
        "finetune.lora_sites": LORA_SITE_FLAGS.get(args.lora_sites,
                                                   args.lora_sites)
        if args.lora_sites else None,
        "finetune.head_lr": args.head_lr,
        "finetune.lora_lr": args.lora_lr,
    }
    if args.config:
        cfg = RunConfig.resolve(args.config, overrides)
    else:
        cfg = _load_meta_config(args.pretrained, overrides)
    os.makedirs(args.out, exist_ok=True)
    trials = load_trials(args.data)
    if args.phase:
        trials = [t for t in trials if t.phase == args.phase]
        if not trials:
            raise CommandError(f"no trials in phase {args.phase}")
    model = _build_model(cfg, parser)
    state, _ = load_checkpoint(args.pretrained)
    model.load_state(state)
    finetune_cfg = FinetuneConfig(
        head_lr=cfg.get_float("finetune.head_lr"),
        lora_lr=cfg.get_float("finetune.lora_lr"),
        batch_size=cfg.get_int("finetune.batch_size"),
        epochs=cfg.get_int("finetune.epochs"),
        seed=cfg.get_int("seed"),
        val_fraction=cfg.get_float("finetune.val_fraction"),
        lora_sites=cfg.get("finetune.lora_sites"),
        lora_rank=cfg.get_int("finetune.lora_rank"),
    )
    result = train_finetune(model, trials, finetune_cfg)
    ckpt = os.path.join(args.out, "finetune.ckpt")
    save_checkpoint(ckpt, model.state(), cfg.hash_bytes())
    _write_meta(ckpt + ".meta.json", cfg, "finetune",
                {"best_epoch": result.best_epoch, "d_llm": model.d_llm,
                 "class_weights": list(result.class_weights)})
    _write_lines(os.path.join(args.out, "finetune_metrics.csv"),
                 [_stamp(cfg)] + result.curve_rows())
    print(f"checkpoint={ckpt} best_epoch={result.best_epoch} "
          f"best_val_f1={result.best_val_f1:.4f}")
    return 0


def cmd_eval(args, parser) -> int:
    _require_file(parser, args.model, "--model checkpoint")
    _require_file(parser, args.data, "--data trial file")
    overrides = {
        "seed": args.seed,
        "data.icd_tree": args.icd_tree,
        "data.seg_dict": args.seg_dict,
        "encoder.kind": args.encoder,
        "encoder.store": args.store,
    }
    if args.config:
        cfg = RunConfig.resolve(args.config, overrides)
    else:
        cfg = _load_meta_config(args.model, overrides)
    os.makedirs(args.out, exist_ok=True)
    test = [t for t in load_trials(args.data) if t.label is not None]
    if not test:
        raise CommandError("no labeled trials in --data")
    model = _build_model(cfg, parser)
    setup_finetune(model, FinetuneConfig(
        seed=cfg.get_int("seed"), lora_sites=cfg.get("finetune.lora_sites"),
        lora_rank=cfg.get_int("finetune.lora_rank")))
    state, _ = load_checkpoint(args.model)
    model.load_state(state)

    subsets = {"full": test}
    if args.subset == "new-disease":
        _require_file(parser, args.train_data, "--train-data file")
        train_sets = [load_trials(p) for p in args.train_data.split(",")]
        subsets = {"new-disease": new_disease_subset(train_sets, test)}
        if not subsets["new-disease"]:
            raise CommandError("new-disease subset is empty")
        leak = leakage_check([t for ts in train_sets for t in ts], test)
        if not leak.passed:
            raise CommandError(
                f"leakage between train and test: {leak.shared_ids}")

    threads = max_threads()
    for name, subset in subsets.items():
        examples = [
            ScoredExample(t.nct_id, predict(model, t), t.label) for t in subset
        ]
        report = bootstrap_eval(
            examples, n_draws=cfg.get_int("eval.n_draws"),
            fraction=cfg.get_float("eval.fraction"), seed=cfg.get_int("seed"),
            subset_name=name, max_workers=threads,
        )
        slug = name.replace("-", "_")
        _write_lines(os.path.join(args.out, f"eval_{slug}.csv"),
                     [_stamp(cfg)] + report.csv_rows())
        with open(os.path.join(args.out, f"eval_{slug}.json"), "w",
                  encoding="utf-8") as fh:
            fh.write(report.to_json() + "\n")
        for row in report.csv_rows()[1:]:
            print(f"{name}: {row}")
    return 0


def cmd_gradcheck(args, parser) -> int:
    from .numerics import Parameter, constant, mul, sum_all
    from .pretrain import PairBatch, pretrain_loss
    from .data_pipeline import TrialRecord
    from .seeding import seeded_rng

    cfg = RunConfig.resolve(args.config, {"seed": args.seed})
    seed = cfg.get_int("seed")
    rng = seeded_rng(seed, "gradcheck-cli")
    failures = []

    def check(name, f, params, tol=1e-3):
        err = finite_diff_check(f, params, max_coords=args.max_coords, rng=rng)
        status = "ok" if err < tol else "FAIL"
        print(f"{name}: max_rel_err={err:.3e} [{status}]")
        if err >= tol:
            failures.append(name)

    p = Parameter(rng.uniform(-1, 1, size=(4, 4)))
    w = constant(rng.uniform(-1, 1, size=(4, 4)), dtype=np.float64)
    check("elementwise", lambda: sum_all(mul(mul(p.tensor(), p.tensor()), w)), [p])

    arch = ArchConfig(d_dm=8, num_heads=2, d_mol=16, enrich_layers=1,
                      grouping_layers=2, self_layers=1, final_centroids=2,
                      dtype=np.float64)
    tree = IcdTree({"A00-B99": "ICD10", "C00-D49": "ICD10", "A00": "A00-B99",
                    "C34": "C00-D49"}, "ICD10")
    seg = SmilesSegmentDict.hash_fallback(d_mol=16, seed=seed)
    encoder = ToyCriteriaEncoder(seed=seed, d_llm=12)
    model = TrialOutcomeModel.build(arch, seg, tree, encoder, seed=seed)
    trials = [
        TrialRecord("NCTA", "II", ["CCO"], ["A00", "C34"], "alpha beta gamma",
                    "2014-01-01"),
        TrialRecord("NCTB", "II", ["NC"], ["C34", "A00"], "delta epsilon",
                    "2014-01-01"),
    ]

    def full_path():
        from .numerics import concat_rows

        f_c = concat_rows([model.f_c(model.encode_criteria(t)) for t in trials])
        f_dm = concat_rows([model.f_dm(t) for t in trials])
        return pretrain_loss(PairBatch(f_c, f_dm, ["a", "b"]), tau=model.tau)

    check("fuse_forward+pool+loss", full_path, model.params.parameters())

    if failures:
        print(f"gradient check failed: {failures}")
        return 1
    print("gradient check passed")
    return 0


def cmd_bench(args, parser) -> int:
    overrides = {"seed": args.seed, "bench.crit_lens": args.crit_lens,
                 "bench.n_mol": args.n_mol, "bench.n_dis": args.n_dis}
    cfg = RunConfig.resolve(args.config, overrides)
    os.makedirs(args.out, exist_ok=True)
    arch = _arch_from_config(cfg)
    lens = cfg.get_int_list("bench.crit_lens")
    n_mol, n_dis = cfg.get_int("bench.n_mol"), cfg.get_int("bench.n_dis")
    rows = ["n_crit,grouping_fusion_macs,grouping_ratio,flat_fusion_macs,"
            "flat_ratio,grouping_total_macs,flat_total_macs"]
    base_group = base_flat = None
    for n in lens:
        report = count_attention_ops(arch, n_mol, n_dis, n)
        if base_group is None:
            base_group = report.grouping_fusion_macs
            base_flat = report.flat_fusion_macs
        rows.append(
            f"{n},{report.grouping_fusion_macs},"
            f"{report.grouping_fusion_macs / base_group:.4f},"
            f"{report.flat_fusion_macs},"
            f"{report.flat_fusion_macs / base_flat:.4f},"
            f"{report.grouping_total_macs},{report.flat_total_macs}"
        )
    _write_lines(os.path.join(args.out, "bench.csv"), [_stamp(cfg)] + rows)
    for row in rows:
        print(row)
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cladmop",
        description="Two-branch clinical-trial outcome model workflow",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_default="out"):
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--seed", type=int, default=None, help="master seed")
        p.add_argument("--out", default=out_default, help="output directory")

    p = sub.add_parser("build-dataset", help="construct the success-labeled corpus")
    common(p)
    p.add_argument("--data", required=True, help="raw trials JSONL")
    p.add_argument("--synonyms", help="synonym<TAB>canonical_id file")
    p.add_argument("--marketed", help="one marketed canonical id per line")
    p.add_argument("--cut-date", dest="cut_date",
                   help="also emit a temporal train/val/test split at this date")
    p.set_defaults(func=cmd_build_dataset)

    def model_inputs(p):
        p.add_argument("--encoder", choices=("toy", "store"), default=None)
        p.add_argument("--store", help="embedding store for --encoder store")
        p.add_argument("--icd-tree", dest="icd_tree", help="child<TAB>parent file")
        p.add_argument("--seg-dict", dest="seg_dict",
                       help="segment dictionary file (hash fallback when absent)")

    p = sub.add_parser("pretrain", help="pair-matching pre-training")
    common(p)
    model_inputs(p)
    p.add_argument("--data", required=True, help="successful-trials JSONL")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    p.add_argument("--learning-rate", dest="learning_rate", type=float,
                   default=None)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="parameter-efficient fine-tuning")
    common(p)
    model_inputs(p)
    p.add_argument("--data", required=True, help="labeled trials JSONL")
    p.add_argument("--pretrained", required=True, help="pretrain checkpoint")
    p.add_argument("--phase", choices=("I", "II", "III"), default=None)
    p.add_argument("--lora-sites", dest="lora_sites",
                   choices=tuple(LORA_SITE_FLAGS), default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--head-lr", dest="head_lr", type=float, default=None)
    p.add_argument("--lora-lr", dest="lora_lr", type=float, default=None)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("eval", help="score a labeled test set")
    common(p)
    model_inputs(p)
    p.add_argument("--data", required=True, help="labeled test JSONL")
    p.add_argument("--model", required=True, help="finetune checkpoint")
    p.add_argument("--subset", choices=("full", "new-disease"), default="full")
    p.add_argument("--train-data", dest="train_data",
                   help="comma-separated train JSONL files for new-disease")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    common(p)
    p.add_argument("--max-coords", dest="max_coords", type=int, default=400)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("bench", help="attention op-count scaling table")
    common(p)
    p.add_argument("--crit-lens", dest="crit_lens", default=None,
                   help="comma-separated criteria lengths")
    p.add_argument("--n-mol", dest="n_mol", type=int, default=None)
    p.add_argument("--n-dis", dest="n_dis", type=int, default=None)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args, parser)
    except (CommandError, ConfigError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (OSError, ValueError, KeyError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
