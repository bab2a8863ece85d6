"""Command-line entry point.

One binary, subcommand per pipeline stage. Configuration precedence is
flags > file > defaults; every run writes its resolved config and stamps
the config hash on each artifact (checkpoint metadata, cohort manifest,
or a `.meta` sidecar next to plain-text outputs).

Exit codes: 0 success, 2 configuration error, 3 data error (including
missing inputs and task mismatches), 4 numeric failure.
"""
from __future__ import annotations

import argparse
import itertools
import logging
import os
import sys
from dataclasses import asdict, replace

import numpy as np

from . import autodiff as ad
from .analysis import linear_probe, neighbor_analysis
from .checkpoint import load_checkpoint, save_checkpoint
from .config import (
    RunConfig,
    config_hash,
    render_config,
    resolve_config,
)
from .data import assign_splits, load_cohort, save_cohort, synthesize
from .distill import (
    TrainedModel,
    finetune,
    format_student_trace,
    format_val_trace,
    predict_student,
    predict_teacher,
    train_student,
    train_teacher,
)
from .encoders import EncoderConfig
from .errors import (
    ConfigError,
    DataError,
    MissingInput,
    NumericError,
    OntoclrError,
    TaskMismatch,
)
from .metrics import format_delimited, format_table, report_rows, score_report
from .ontology import format_ontology, load_ontology
from .pretrain import embed_cohort, format_loss_trace, pretrain
from .similarity import (
    DiagnosisSet,
    batch_weight_matrix,
    cohort_weight_cache,
    flat_match_similarity,
    patient_similarity,
    weight,
    weight_histogram,
)

log = logging.getLogger(__name__)

GRID_LEARNING_RATES = (1e-4, 5e-4, 5e-5)
GRID_TEMPERATURES = (1.0, 2.0, 5.0)
GRID_LAMBDAS = (1.0, 5.0, 10.0)
GRID_NOTE_PROBS = (0.0, 0.5, 1.0)


# -- artifact plumbing --------------------------------------------------------------

def _write_text(path: str, text: str, chash: str) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)
    with open(path + ".meta", "w", encoding="utf-8") as fh:
        fh.write(f"config_hash={chash}\n")


def _start_run(cfg: RunConfig, chash: str) -> str:
    out = cfg.output_dir
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "config.ini"), "w", encoding="utf-8") as fh:
        fh.write(render_config(cfg))
    log.info("config hash %s seed %d", chash, cfg.seed)
    log.info("python %s numpy %s", sys.version.split()[0], np.__version__)
    return out


def _save_model(path: str, params: dict[str, np.ndarray], meta: dict) -> None:
    save_checkpoint(path, {k: ad.Tensor(v) for k, v in params.items()}, meta)


def _encoder_meta(enc_cfg) -> dict:
    return asdict(enc_cfg)


def _stats_meta(mean: np.ndarray, std: np.ndarray) -> dict:
    return {"channel_mean": [float(v) for v in mean],
            "channel_std": [float(v) for v in std]}


def _load_model(path: str):
    if not os.path.exists(path):
        raise MissingInput(f"checkpoint {path} does not exist")
    tensors, meta = load_checkpoint(path)
    params = {k: t.data for k, t in tensors.items()}
    enc_cfg = EncoderConfig(**meta["encoder"])
    return params, meta, enc_cfg


def _model_from_parts(params, meta, enc_cfg) -> TrainedModel:
    if "task" not in meta:
        raise TaskMismatch(
            f"checkpoint is a bare encoder ({meta.get('kind', 'unknown')!r}); "
            "train a teacher or student first")
    return TrainedModel(
        params=params, final_params=params,
        best_epoch=int(meta.get("best_epoch", 0)),
        best_val_auroc=float(meta.get("best_val_auroc", float("nan"))),
        val_trace=[], loss_trace=[],
        channel_mean=np.array(meta["channel_mean"], dtype=np.float64),
        channel_std=np.array(meta["channel_std"], dtype=np.float64),
        encoder_config=enc_cfg, task=meta["task"],
        n_classes=int(meta["n_classes"]),
        note_input_hashes=list(meta.get("note_input_hashes", [])),
    )


def _model_from_checkpoint(path: str) -> TrainedModel:
    return _model_from_parts(*_load_model(path))


def _load_bundle(cohort_dir: str):
    if not os.path.isdir(cohort_dir):
        raise MissingInput(f"cohort directory {cohort_dir} does not exist")
    return load_cohort(cohort_dir)


def _load_tree(args):
    path = args.tree or os.path.join(args.cohort, "tree.txt")
    if not os.path.exists(path):
        raise MissingInput(f"ontology file {path} does not exist")
    return load_ontology(path)


def _split_labels(bundle, ids, task):
    if task not in bundle.labels:
        raise TaskMismatch(f"cohort has no {task!r} labels")
    return np.array([bundle.labels[task][p] for p in ids])


def _stat_rows(pairs) -> str:
    lines = ["stat\tvalue"]
    lines += [f"{name}\t{value!r}" if isinstance(value, float)
              else f"{name}\t{value}" for name, value in pairs]
    return "\n".join(lines) + "\n"


# -- subcommands --------------------------------------------------------------------

def cmd_ontology_stats(args, cfg: RunConfig, chash: str) -> int:
    tree = load_ontology(args.tree)
    depth = tree.depth
    internal = np.unique(tree.parent[depth > 0])
    counts = np.bincount(tree.parent[depth > 0])
    rows = [
        ("nodes", len(tree)),
        ("root", tree.root),
        ("max_depth", tree.max_depth),
        ("leaves", len(tree) - internal.size),
        ("internal_nodes", int(internal.size)),
        ("mean_branching", float(counts[internal].mean()) if internal.size else 0.0),
        ("max_branching", int(counts.max()) if counts.size else 0),
    ]
    rows += [(f"depth_{d}_nodes", int((depth == d).sum()))
             for d in range(tree.max_depth + 1)]
    text = _stat_rows(rows)
    sys.stdout.write(text)
    out = _start_run(cfg, chash)
    _write_text(os.path.join(out, "ontology_stats.tsv"), text, chash)
    return 0


def cmd_sim(args, cfg: RunConfig, chash: str) -> int:
    tree = load_ontology(args.tree)
    if args.codes_a or args.codes_b:
        if not (args.codes_a and args.codes_b):
            raise ConfigError("--codes-a and --codes-b must be given together")
        a = DiagnosisSet("a", frozenset(args.codes_a.split(",")))
        b = DiagnosisSet("b", frozenset(args.codes_b.split(",")))
        value = patient_similarity(tree, a, b)
    elif args.a is not None and args.b is not None:
        value = tree.code_similarity(args.a, args.b)
    else:
        raise ConfigError("pass either --a/--b codes or --codes-a/--codes-b sets")
    if args.weighted:
        value = weight(cfg.weights, value)
    sys.stdout.write(f"{value!r}\n")
    if args.out:
        _start_run(cfg, chash)
    return 0


def _cohort_sets(bundle) -> list[DiagnosisSet]:
    return bundle.diagnosis_list()


def _histogram_text(hist) -> str:
    lines = ["bin_low\tbin_high\tcount"]
    for i, count in enumerate(hist.counts):
        lines.append(f"{hist.edges[i]!r}\t{hist.edges[i + 1]!r}\t{int(count)}")
    return "\n".join(lines) + "\n"


def cmd_weights(args, cfg: RunConfig, chash: str) -> int:
    bundle = _load_bundle(args.cohort)
    tree = _load_tree(args)
    sets = _cohort_sets(bundle)
    if args.cache_dir:
        cache = cohort_weight_cache(tree, sets, cfg.weights, args.cache_dir)
        matrix = cache.gather(range(len(cache.order)))
    else:
        matrix = batch_weight_matrix(tree, sets, cfg.weights)
    hist = weight_histogram(matrix, args.bins)
    out = _start_run(cfg, chash)
    _write_text(os.path.join(out, "weight_histogram.tsv"),
                _histogram_text(hist), chash)
    n = len(sets)
    summary = _stat_rows([
        ("patients", n),
        ("pairs", n * (n - 1) // 2),
        ("family", cfg.weights.family),
        ("gamma", cfg.weights.gamma),
        ("fraction_below_one", hist.fraction_below_one),
    ])
    _write_text(os.path.join(out, "weight_summary.tsv"), summary, chash)
    sys.stdout.write(summary)
    return 0


def flat_weight_fractions(tree, sets, spec) -> tuple[float, float]:
    """Fraction of unordered pairs with weight < 1: flat matching vs ontology."""
    n = len(sets)
    onto = batch_weight_matrix(tree, sets, spec).values
    iu = np.triu_indices(n, k=1)
    onto_frac = float((onto[iu] < 1.0).mean())
    below = sum(
        weight(spec, flat_match_similarity(sets[i], sets[j])) < 1.0
        for i, j in zip(*iu)
    )
    return below / iu[0].size, onto_frac


def cmd_analyze_weights(args, cfg: RunConfig, chash: str) -> int:
    bundle = _load_bundle(args.cohort)
    tree = _load_tree(args)
    sets = _cohort_sets(bundle)
    flat_frac, onto_frac = flat_weight_fractions(tree, sets, cfg.weights)
    n = len(sets)
    text = _stat_rows([
        ("patients", n),
        ("pairs", n * (n - 1) // 2),
        ("family", cfg.weights.family),
        ("gamma", cfg.weights.gamma),
        ("flat_fraction_below_one", flat_frac),
        ("ontology_fraction_below_one", onto_frac),
    ])
    out = _start_run(cfg, chash)
    _write_text(os.path.join(out, "weight_comparison.tsv"), text, chash)
    sys.stdout.write(text)
    return 0


def cmd_synth(args, cfg: RunConfig, chash: str) -> int:
    out = _start_run(cfg, chash)
    bundle, tree = synthesize(cfg.synth)
    bundle = assign_splits(bundle, cfg.fractions, cfg.seed, cfg.stratify_task)
    bundle = replace(bundle, config_hash=chash)
    cohort_dir = os.path.join(out, "cohort")
    save_cohort(bundle, cohort_dir)
    _write_text(os.path.join(cohort_dir, "tree.txt"), format_ontology(tree),
                chash)
    log.info("cohort of %d patients under %s", len(bundle.patients), cohort_dir)
    return 0


def cmd_pretrain(args, cfg: RunConfig, chash: str) -> int:
    bundle = _load_bundle(args.cohort)
    tree = _load_tree(args)
    enc_cfg = cfg.encoder.materialize(2 * bundle.channels, bundle.horizon_hours)
    cache = None
    if args.cache_dir:
        ids = bundle.ids_for("train")
        sets = [bundle.diagnoses[p] for p in ids]
        cache = cohort_weight_cache(tree, sets, cfg.weights, args.cache_dir)
    res = pretrain(bundle, tree, cfg.pretrain, cfg.augment, enc_cfg,
                   weight_cache=cache)
    out = _start_run(cfg, chash)
    meta = {"step": len(res.loss_trace), "seed": cfg.seed, "config_hash": chash,
            "kind": "encoder", "best_epoch": res.best_epoch,
            "encoder": _encoder_meta(res.encoder_config),
            **_stats_meta(res.channel_mean, res.channel_std)}
    _save_model(os.path.join(out, "encoder_best.ckpt"), res.best_params, meta)
    _save_model(os.path.join(out, "encoder_final.ckpt"), res.final_params, meta)
    _write_text(os.path.join(out, "pretrain_loss.csv"),
                format_loss_trace(res.loss_trace), chash)
    log.info("pretrained %d epochs, best epoch %d",
             cfg.pretrain.epochs, res.best_epoch)
    return 0


def _teacher_meta(model: TrainedModel, cfg: RunConfig, chash: str,
                  kind: str) -> dict:
    return {"step": len(model.loss_trace), "seed": cfg.seed,
            "config_hash": chash, "kind": kind, "task": model.task,
            "n_classes": model.n_classes, "best_epoch": model.best_epoch,
            "best_val_auroc": model.best_val_auroc,
            "encoder": _encoder_meta(model.encoder_config),
            "note_input_hashes": model.note_input_hashes,
            **_stats_meta(model.channel_mean, model.channel_std)}


def cmd_teach(args, cfg: RunConfig, chash: str) -> int:
    bundle = _load_bundle(args.cohort)
    enc_cfg = cfg.encoder.materialize(2 * bundle.channels, bundle.horizon_hours)
    model = train_teacher(bundle, cfg.distill, enc_cfg)
    out = _start_run(cfg, chash)
    meta = _teacher_meta(model, cfg, chash, "teacher")
    _save_model(os.path.join(out, "teacher.ckpt"), model.params, meta)
    _write_text(os.path.join(out, "teacher_loss.csv"),
                format_loss_trace(model.loss_trace), chash)
    _write_text(os.path.join(out, "teacher_val.csv"),
                format_val_trace(model.val_trace), chash)
    log.info("teacher best val AUROC %r at epoch %d",
             model.best_val_auroc, model.best_epoch)
    return 0


def _init_params(args) -> dict[str, np.ndarray] | None:
    if not getattr(args, "init", None):
        return None
    params, _, _ = _load_model(args.init)
    return params


def _emit_student(out: str, model: TrainedModel, cfg: RunConfig, chash: str,
                  name: str = "student") -> None:
    meta = _teacher_meta(model, cfg, chash, "student")
    _save_model(os.path.join(out, f"{name}.ckpt"), model.params, meta)
    _write_text(os.path.join(out, f"{name}_loss.csv"),
                format_student_trace(model.loss_trace), chash)
    _write_text(os.path.join(out, f"{name}_val.csv"),
                format_val_trace(model.val_trace), chash)


def cmd_distill(args, cfg: RunConfig, chash: str) -> int:
    bundle = _load_bundle(args.cohort)
    teacher = _model_from_checkpoint(args.teacher)
    model = train_student(bundle, cfg.distill, teacher,
                          init_params=_init_params(args))
    out = _start_run(cfg, chash)
    _emit_student(out, model, cfg, chash)
    log.info("student best val AUROC %r at epoch %d",
             model.best_val_auroc, model.best_epoch)
    return 0


def cmd_finetune(args, cfg: RunConfig, chash: str) -> int:
    bundle = _load_bundle(args.cohort)
    enc_cfg = cfg.encoder.materialize(2 * bundle.channels, bundle.horizon_hours)
    model = finetune(bundle, cfg.distill, init_params=_init_params(args),
                     enc_cfg=enc_cfg)
    out = _start_run(cfg, chash)
    _emit_student(out, model, cfg, chash, name="finetuned")
    log.info("finetuned best val AUROC %r at epoch %d",
             model.best_val_auroc, model.best_epoch)
    return 0


def cmd_probe(args, cfg: RunConfig, chash: str) -> int:
    bundle = _load_bundle(args.cohort)
    params, meta, enc_cfg = _load_model(args.checkpoint)
    mean = np.array(meta["channel_mean"], dtype=np.float64)
    std = np.array(meta["channel_std"], dtype=np.float64)
    train_ids = bundle.ids_for("train")
    test_ids = bundle.ids_for(cfg.eval_split)
    emb_train = embed_cohort(bundle, params, enc_cfg, mean, std, train_ids)
    emb_test = embed_cohort(bundle, params, enc_cfg, mean, std, test_ids)
    fraction = args.fraction if args.fraction is not None else cfg.label_fraction
    report = linear_probe(emb_train,
                          _split_labels(bundle, train_ids, cfg.probe_task),
                          emb_test,
                          _split_labels(bundle, test_ids, cfg.probe_task),
                          label_fraction=fraction, cfg=cfg.probe)
    rows = report_rows(report)
    out = _start_run(cfg, chash)
    _write_text(os.path.join(out, "probe_report.txt"), format_table(rows), chash)
    _write_text(os.path.join(out, "probe_report.tsv"), format_delimited(rows),
                chash)
    sys.stdout.write(format_table(rows))
    return 0


def cmd_eval(args, cfg: RunConfig, chash: str) -> int:
    bundle = _load_bundle(args.cohort)
    params, meta, enc_cfg = _load_model(args.checkpoint)
    model = _model_from_parts(params, meta, enc_cfg)
    kind = meta.get("kind", "student")
    ids = bundle.ids_for(cfg.eval_split)
    if not ids:
        raise TaskMismatch(f"split {cfg.eval_split!r} is empty")
    predict = predict_teacher if kind == "teacher" else predict_student
    scores = predict(bundle, model, ids)
    labels = _split_labels(bundle, ids, model.task)
    report = score_report(scores, labels, n_resamples=cfg.n_resamples,
                          level=cfg.ci_level, seed=cfg.seed)
    rows = report_rows(report)
    out = _start_run(cfg, chash)
    _write_text(os.path.join(out, "eval_report.txt"), format_table(rows), chash)
    _write_text(os.path.join(out, "eval_report.tsv"), format_delimited(rows),
                chash)
    sys.stdout.write(format_table(rows))
    return 0


def cmd_analyze_neighbors(args, cfg: RunConfig, chash: str) -> int:
    bundle = _load_bundle(args.cohort)
    tree = _load_tree(args)
    params, meta, enc_cfg = _load_model(args.checkpoint)
    mean = np.array(meta["channel_mean"], dtype=np.float64)
    std = np.array(meta["channel_std"], dtype=np.float64)
    emb = embed_cohort(bundle, params, enc_cfg, mean, std)
    res = neighbor_analysis(emb, _cohort_sets(bundle), tree,
                            k=cfg.neighbors_k,
                            n_random_pairs=cfg.n_random_pairs, seed=cfg.seed)
    text = _stat_rows([
        ("k", res.k),
        ("knn_mean", res.knn_mean),
        ("random_mean", res.random_mean),
        ("u", res.u),
        ("p_value", res.p_value),
        ("effect_size_r", res.effect_size_r),
        ("n_knn_pairs", res.n_knn_pairs),
        ("n_random_pairs", res.n_random_pairs),
    ])
    out = _start_run(cfg, chash)
    _write_text(os.path.join(out, "neighbor_report.tsv"), text, chash)
    sys.stdout.write(text)
    return 0


def grid_configs(cfg: RunConfig):
    """The 81 stage-2 hyperparameter combinations, in enumeration order."""
    combos = itertools.product(GRID_LEARNING_RATES, GRID_TEMPERATURES,
                               GRID_LAMBDAS, GRID_NOTE_PROBS)
    out = []
    for i, (lr, t, lam, p) in enumerate(combos):
        distill = replace(cfg.distill, learning_rate=lr, temperature=t,
                          lambda_distill=lam, raw_note_prob=p)
        out.append((f"cfg_{i:02d}", replace(cfg, distill=distill)))
    return out


def cmd_grid(args, cfg: RunConfig, chash: str) -> int:
    bundle = None if args.dry_run else _load_bundle(args.cohort)
    init = None if args.dry_run else _init_params(args)
    out = _start_run(cfg, chash)
    grid_dir = os.path.join(out, "grid")
    teachers: dict[tuple[float, float], TrainedModel] = {}
    index = []
    for name, sub in grid_configs(cfg):
        sub_dir = os.path.join(grid_dir, name)
        os.makedirs(sub_dir, exist_ok=True)
        sub_hash = config_hash(sub)
        with open(os.path.join(sub_dir, "config.ini"), "w",
                  encoding="utf-8") as fh:
            fh.write(render_config(sub))
        d = sub.distill
        if args.dry_run:
            index.append((name, d.learning_rate, d.temperature,
                          d.lambda_distill, d.raw_note_prob, float("nan")))
            continue
        key = (d.learning_rate, d.raw_note_prob)
        if key not in teachers:
            enc_cfg = cfg.encoder.materialize(2 * bundle.channels,
                                              bundle.horizon_hours)
            teachers[key] = train_teacher(bundle, d, enc_cfg)
        teacher = teachers[key]
        model = train_student(bundle, d, teacher, init_params=init)
        _emit_student(sub_dir, model, sub, sub_hash)
        index.append((name, d.learning_rate, d.temperature, d.lambda_distill,
                      d.raw_note_prob, model.best_val_auroc))
        log.info("%s val AUROC %r", name, model.best_val_auroc)

    ordered = sorted(index, key=lambda r: (-(r[5] if np.isfinite(r[5]) else
                                             -np.inf), r[0]))
    lines = ["config_id\tlearning_rate\ttemperature\tlambda_distill\t"
             "raw_note_prob\tval_auroc"]
    lines += [f"{n}\t{lr!r}\t{t!r}\t{lam!r}\t{p!r}\t{v!r}"
              for n, lr, t, lam, p, v in ordered]
    _write_text(os.path.join(grid_dir, "index.tsv"), "\n".join(lines) + "\n",
                chash)
    sys.stdout.write(f"{len(index)} configurations under {grid_dir}\n")
    return 0


# -- parser -------------------------------------------------------------------------

def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI run configuration file")
    common.add_argument("--set", action="append", default=[],
                        metavar="SECTION.KEY=VALUE",
                        help="override one config value (repeatable)")
    common.add_argument("--seed", type=int, help="override [run] seed")
    common.add_argument("--out", help="override [run] output_dir")
    common.add_argument("--verbose", action="store_true",
                        help="debug-level logging")

    p = argparse.ArgumentParser(
        prog="ontoclr",
        description="Ontology-weighted contrastive pretraining and "
                    "teacher-student distillation for clinical time series.")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, handler, help_text, **extra_args):
        sp = sub.add_parser(name, parents=[common], help=help_text)
        for flag, kwargs in extra_args.items():
            sp.add_argument(f"--{flag.replace('_', '-')}", **kwargs)
        sp.set_defaults(handler=handler)
        return sp

    add("ontology-stats", cmd_ontology_stats, "summarize an ontology tree",
        tree=dict(required=True, help="ontology edge-list file"))
    add("sim", cmd_sim, "code-pair or patient-pair similarity query",
        tree=dict(required=True, help="ontology edge-list file"),
        a=dict(help="first code"), b=dict(help="second code"),
        codes_a=dict(help="comma-separated codes of patient A"),
        codes_b=dict(help="comma-separated codes of patient B"),
        weighted=dict(action="store_true",
                      help="apply the configured weight transform"))
    add("weights", cmd_weights, "build/inspect cohort pair weights",
        cohort=dict(required=True, help="cohort archive directory"),
        tree=dict(help="ontology file (default: cohort/tree.txt)"),
        cache_dir=dict(help="persist the pair-weight cache here"),
        bins=dict(type=int, default=20, help="histogram bins"))
    add("analyze-weights", cmd_analyze_weights,
        "flat exact-match vs ontology-aware weight distribution",
        cohort=dict(required=True), tree=dict(help="ontology file"))
    add("synth", cmd_synth, "generate a synthetic cohort archive")
    add("pretrain", cmd_pretrain, "stage-1 contrastive pretraining",
        cohort=dict(required=True), tree=dict(help="ontology file"),
        cache_dir=dict(help="pair-weight cache directory"))
    add("teach", cmd_teach, "train the notes+vitals teacher",
        cohort=dict(required=True))
    add("distill", cmd_distill, "train the student against a teacher",
        cohort=dict(required=True),
        teacher=dict(required=True, help="teacher checkpoint"),
        init=dict(help="stage-1 encoder checkpoint to initialize from"))
    add("finetune", cmd_finetune, "supervised student without distillation",
        cohort=dict(required=True),
        init=dict(help="stage-1 encoder checkpoint to initialize from"))
    add("probe", cmd_probe, "linear probe on frozen embeddings",
        cohort=dict(required=True),
        checkpoint=dict(required=True, help="checkpoint with encoder params"),
        fraction=dict(type=float, help="labeled fraction (default from config)"))
    add("eval", cmd_eval, "score a trained model on a held-out split",
        cohort=dict(required=True),
        checkpoint=dict(required=True, help="teacher or student checkpoint"))
    add("analyze-neighbors", cmd_analyze_neighbors,
        "diagnosis similarity of embedding nearest neighbors",
        cohort=dict(required=True), tree=dict(help="ontology file"),
        checkpoint=dict(required=True))
    add("grid", cmd_grid, "stage-2 hyperparameter sweep (81 configurations)",
        cohort=dict(help="cohort archive directory"),
        init=dict(help="stage-1 encoder checkpoint"),
        dry_run=dict(action="store_true",
                     help="enumerate configurations without training"))
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    try:
        overrides = list(args.set)
        if args.seed is not None:
            overrides.append(f"run.seed={args.seed}")
        if args.out is not None:
            overrides.append(f"run.output_dir={args.out}")
        cfg = resolve_config(args.config, overrides)
        if getattr(args, "cohort", None) is None and args.command == "grid" \
                and not args.dry_run:
            raise ConfigError("grid needs --cohort unless --dry-run is given")
        return args.handler(args, cfg, config_hash(cfg))
    except ConfigError as exc:
        log.error("configuration error: %s", exc)
        return 2
    except (DataError, TaskMismatch) as exc:
        log.error("data error: %s", exc)
        return 3
    except NumericError as exc:
        log.error("numeric failure: %s", exc)
        return 4
    except OntoclrError as exc:
        log.error("%s", exc)
        return 3


if __name__ == "__main__":
    sys.exit(main())
