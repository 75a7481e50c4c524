"""Command-line harness: gen-data, train, eval, ablate.

Configuration precedence, lowest to highest: schema defaults, --profile,
--config file, explicit flags (--seed/--out/--data).  Exit codes are a
stable contract: 0 success, 2 config error, 3 data error, 4 checkpoint
error (argparse usage errors also exit 2).

Determinism note: runs are reproducible bit-for-bit only in single-threaded
BLAS mode; pin OMP_NUM_THREADS=1 (or the OpenBLAS equivalent) when that
matters.
"""

from __future__ import annotations

import argparse
import csv
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .config import (
    RunConfig,
    apply_profile,
    load_config_file,
    parse_config,
    serialize_config,
)
from .data import GeneratorSpec, generate_synthetic, load_dataset, load_images
from .errors import ConfigError, DataError, VqagptError
from .metrics import compute_metrics, report_lines
from .model import (
    forward_logits,
    init_params,
    load_checkpoint,
    restore_model,
    save_checkpoint,
    train_step,
)
from .tokenizers import Vocabulary, build_vocab, tokenize_question

CHECKPOINT_NAME = "model.ckpt"
METRICS_CSV = "metrics.csv"
EVAL_CSV = "eval.csv"
ABLATION_CSV = "ablation.csv"


# ---------------------------------------------------------------------------
# shared plumbing


def _dtype_for(cfg: RunConfig):
    return np.float32 if cfg.precision == "f32" else np.float64


def _resolve_config(args) -> RunConfig:
    cfg = RunConfig()
    if getattr(args, "profile", None):
        cfg = apply_profile(cfg, args.profile)
    if getattr(args, "config", None):
        cfg = load_config_file(args.config, cfg)
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "out", None):
        overrides["out_dir"] = args.out
    if getattr(args, "data", None):
        overrides["data_dir"] = args.data
    if overrides:
        cfg = replace(cfg, **overrides)
    cfg.validate()
    return cfg


def _label_lines(label_map: dict) -> list:
    by_id = sorted(label_map.items(), key=lambda kv: kv[1])
    return [f"{name}\t{idx}" for name, idx in by_id]


def _parse_label_lines(lines) -> dict:
    label_map = {}
    for line in lines:
        name, _, idx = line.partition("\t")
        label_map[name] = int(idx)
    return label_map


def _prepare_arrays(cfg: RunConfig, vocab: Vocabulary, dataset, samples):
    images = load_images(dataset, samples)
    qids = np.stack(
        [tokenize_question(s.question, vocab, cfg.max_question_len) for s in samples]
    )
    labels = np.array([s.answer_class for s in samples], dtype=np.int64)
    types = [s.question_type for s in samples]
    return images, qids, labels, types


def _evaluate_arrays(model, cfg: RunConfig, images, qids, labels, types):
    """Mean loss + MetricsReport over the arrays, batched, no grad recorded."""
    n = len(labels)
    preds = np.empty(n, dtype=np.int64)
    total_loss = 0.0
    with ad.no_grad():
        for lo in range(0, n, cfg.batch_size):
            sl = slice(lo, min(lo + cfg.batch_size, n))
            logits = forward_logits(images[sl], qids[sl], model)
            loss = ad.cross_entropy(logits, labels[sl])
            total_loss += float(loss.data) * (sl.stop - sl.start)
            preds[sl] = np.argmax(logits.data, axis=-1)
    report = compute_metrics(preds, labels, types, n_classes=model.config.num_classes)
    return total_loss / n, report


def _infer_template_count(*datasets) -> int:
    k = max(ds.max_template() for ds in datasets) + 1
    if k < 1:
        raise DataError("cannot infer template count from an empty dataset")
    return k


def _load_split(cfg: RunConfig):
    data_dir = Path(cfg.data_dir)
    train_ds = load_dataset(data_dir / "train.jsonl")
    test_ds = load_dataset(data_dir / "test.jsonl")
    if train_ds.label_map != test_ds.label_map:
        raise DataError("train and test label maps disagree")
    if len(train_ds.label_map) != cfg.num_classes:
        raise ConfigError(
            f"config num_classes={cfg.num_classes} but label map has "
            f"{len(train_ds.label_map)} classes"
        )
    return train_ds, test_ds


def _train_on(cfg: RunConfig, train_ds, test_ds, log=None):
    """Core training loop; returns (model, vocab, per-epoch rows)."""
    dtype = _dtype_for(cfg)
    train_samples = list(train_ds.samples)
    if cfg.rephrased_holdout:
        k = _infer_template_count(train_ds, test_ds)
        if k < 2:
            raise DataError("rephrased holdout needs at least 2 templates in the data")
        train_samples = [s for s in train_samples if s.template_id < k - 1]
    if not train_samples:
        raise DataError("training split is empty")
    vocab = build_vocab([s.question for s in train_samples], cfg.min_word_count)
    model = init_params(cfg.to_model_config(vocab.size), cfg.seed, dtype)
    opt = ad.AdamState(lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)
    images, qids, labels, types = _prepare_arrays(cfg, vocab, train_ds, train_samples)
    t_images, t_qids, t_labels, t_types = _prepare_arrays(
        cfg, vocab, test_ds, test_ds.samples
    )
    shuffle_rng = np.random.Generator(np.random.PCG64([cfg.seed, 1]))
    rows = []

    def snapshot(epoch: int, running_loss):
        tr_loss, tr_rep = _evaluate_arrays(model, cfg, images, qids, labels, types)
        va_loss, va_rep = _evaluate_arrays(model, cfg, t_images, t_qids, t_labels, t_types)
        row = {
            "epoch": epoch,
            "train_loss": repr(running_loss if running_loss is not None else tr_loss),
            "train_acc": f"{tr_rep.acc:.6f}",
            "train_recall": f"{tr_rep.macro_recall:.6f}",
            "train_fscore": f"{tr_rep.macro_fscore:.6f}",
            "val_loss": repr(va_loss),
            "val_acc": f"{va_rep.acc:.6f}",
            "val_recall": f"{va_rep.macro_recall:.6f}",
            "val_fscore": f"{va_rep.macro_fscore:.6f}",
        }
        rows.append(row)
        if log:
            log(
                f"epoch {epoch}/{cfg.epochs}  train_loss={float(row['train_loss']):.6f}"
                f"  train_acc={row['train_acc']}  val_acc={row['val_acc']}"
            )

    if cfg.epochs == 0:
        snapshot(0, None)
    for epoch in range(1, cfg.epochs + 1):
        perm = shuffle_rng.permutation(len(train_samples))
        total = 0.0
        for lo in range(0, len(perm), cfg.batch_size):
            idx = perm[lo : lo + cfg.batch_size]
            loss = train_step((images[idx], qids[idx], labels[idx]), model, opt)
            total += loss * len(idx)
        snapshot(epoch, total / len(perm))
    return model, vocab, rows


def _write_csv(path, header, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        writer.writerows(rows)


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args) -> int:
    cfg = _resolve_config(args)
    spec = GeneratorSpec(
        grid=cfg.grid_size,
        image_size=cfg.image_size,
        templates_per_type=cfg.templates_per_type,
        test_fraction=cfg.test_fraction,
    )
    train_ds, test_ds = generate_synthetic(cfg.seed, cfg.n_samples, spec, cfg.data_dir)
    print(
        f"wrote {len(train_ds)} train / {len(test_ds)} test samples "
        f"({len(train_ds.label_map)} classes) to {cfg.data_dir}"
    )
    return 0


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    train_ds, test_ds = _load_split(cfg)
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    model, vocab, rows = _train_on(cfg, train_ds, test_ds, log=print)
    header = [
        "epoch", "train_loss", "train_acc", "train_recall", "train_fscore",
        "val_loss", "val_acc", "val_recall", "val_fscore",
    ]
    _write_csv(out_dir / METRICS_CSV, header, [[r[h] for h in header] for r in rows])
    save_checkpoint(
        out_dir / CHECKPOINT_NAME,
        model,
        serialize_config(cfg),
        vocab.to_lines(),
        _label_lines(train_ds.label_map),
    )
    print(f"checkpoint: {out_dir / CHECKPOINT_NAME}")
    print(f"metrics: {out_dir / METRICS_CSV}")
    return 0


def _eval_blocks(dataset, rephrased: bool):
    """Return (block_name, samples) pairs for evaluation."""
    if not rephrased:
        return [("test", dataset.samples)]
    k = _infer_template_count(dataset)
    if k < 2:
        raise DataError("--rephrased needs at least 2 templates in the dataset")
    default_samples = [s for s in dataset.samples if s.template_id < k - 1]
    held_out = [s for s in dataset.samples if s.template_id == k - 1]
    if not held_out:
        raise DataError(f"no samples use the held-out template {k - 1}")
    return [("default_templates", default_samples), ("rephrased", held_out)]


def cmd_eval(args) -> int:
    config_text, vocab_lines, label_lines, tensors = load_checkpoint(args.checkpoint)
    cfg = parse_config(config_text)
    if args.out:
        cfg = replace(cfg, out_dir=args.out)
    if args.data:
        cfg = replace(cfg, data_dir=args.data)
    cfg.validate()
    vocab = Vocabulary.from_lines(vocab_lines)
    ckpt_label_map = _parse_label_lines(label_lines)
    model = restore_model(
        cfg.to_model_config(vocab.size, len(ckpt_label_map)), tensors, _dtype_for(cfg)
    )
    test_ds = load_dataset(Path(cfg.data_dir) / "test.jsonl")
    if test_ds.label_map != ckpt_label_map:
        raise ConfigError("checkpoint label map does not match the dataset's labels.tsv")
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_rows = []
    block_reports = {}
    for block, samples in _eval_blocks(test_ds, args.rephrased):
        if not samples:
            continue
        arrays = _prepare_arrays(cfg, vocab, test_ds, samples)
        loss, report = _evaluate_arrays(model, cfg, *arrays)
        block_reports[block] = report
        for line in report_lines(report, title=block):
            print(line)
        print(f"  loss={loss:.6f}")
        csv_rows.append([block, "overall", report.n, f"{report.acc:.6f}",
                         f"{report.macro_recall:.6f}", f"{report.macro_fscore:.6f}"])
        for tag, tm in report.per_type.items():
            csv_rows.append([block, tag, tm.n, f"{tm.acc:.6f}",
                             f"{tm.macro_recall:.6f}", f"{tm.macro_fscore:.6f}"])
    if args.rephrased and "default_templates" in block_reports and "rephrased" in block_reports:
        delta = block_reports["default_templates"].acc - block_reports["rephrased"].acc
        print(f"rephrased degradation (default acc - rephrased acc): {delta:+.4f}")
    _write_csv(
        out_dir / EVAL_CSV,
        ["block", "scope", "n", "acc", "macro_recall", "macro_fscore"],
        csv_rows,
    )
    print(f"eval csv: {out_dir / EVAL_CSV}")
    return 0


_ABLATION_ORDERS = ("early_word", "early_vision")
_ABLATION_POSES = ("zero", "actual")
_ABLATION_BACKENDS = ("cnn_lite", "vit_lite")


def cmd_ablate(args) -> int:
    cfg = _resolve_config(args)
    train_ds, test_ds = _load_split(cfg)
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    cell_acc = {}
    for order in _ABLATION_ORDERS:
        for pose in _ABLATION_POSES:
            for backend in _ABLATION_BACKENDS:
                cell = (order, pose, backend)
                cell_cfg = replace(
                    cfg, order=order, vision_pose_mode=pose, vision_backend=backend
                )
                label = f"{order}/{pose}/{backend}"
                print(f"[ablate] training cell {label}")
                try:
                    model, vocab, _ = _train_on(cell_cfg, train_ds, test_ds)
                    arrays = _prepare_arrays(cell_cfg, vocab, test_ds, test_ds.samples)
                    _, report = _evaluate_arrays(model, cell_cfg, *arrays)
                except Exception as exc:  # keep remaining cells running
                    rows.append(list(cell) + [cfg.use_type_embedding, "overall", "",
                                              "", "", "", f"error: {exc}"])
                    print(f"[ablate] cell {label} failed: {exc}")
                    continue
                cell_acc[cell] = report.acc
                rows.append(list(cell) + [
                    cfg.use_type_embedding, "overall", report.n,
                    f"{report.acc:.6f}", f"{report.macro_recall:.6f}",
                    f"{report.macro_fscore:.6f}", "ok",
                ])
                for tag, tm in report.per_type.items():
                    rows.append(list(cell) + [
                        cfg.use_type_embedding, tag, tm.n, f"{tm.acc:.6f}",
                        f"{tm.macro_recall:.6f}", f"{tm.macro_fscore:.6f}", "ok",
                    ])
    _write_csv(
        out_dir / ABLATION_CSV,
        ["order", "pose_mode", "backend", "type_embedding", "scope", "n",
         "acc", "macro_recall", "macro_fscore", "status"],
        rows,
    )
    print(f"ablation csv: {out_dir / ABLATION_CSV}")
    for title, axis, a, b in (
        ("order", 0, "early_word", "early_vision"),
        ("pose_mode", 1, "actual", "zero"),
        ("backend", 2, "cnn_lite", "vit_lite"),
    ):
        accs_a = [v for c, v in cell_acc.items() if c[axis] == a]
        accs_b = [v for c, v in cell_acc.items() if c[axis] == b]
        if accs_a and accs_b:
            delta = float(np.mean(accs_a) - np.mean(accs_b))
            print(f"acc delta ({a} - {b}): {delta:+.4f}")
        else:
            print(f"acc delta ({a} - {b}): unavailable (cell failures)")
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def _add_common(p, with_data=True):
    p.add_argument("--config", help="path to a key = value config file")
    p.add_argument("--profile", choices=("desk", "paper"), help="named settings bundle")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--out", help="override the output directory")
    if with_data:
        p.add_argument("--data", help="override the dataset directory")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vqagpt",
        description="Train and evaluate a desk-scale multimodal VQA decoder.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic shapes-VQA corpus")
    _add_common(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    _add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    p.add_argument("--checkpoint", required=True, help="path to a model.ckpt")
    p.add_argument("--data", help="override the dataset directory")
    p.add_argument("--out", help="override the output directory")
    p.add_argument(
        "--rephrased",
        action="store_true",
        help="report the held-out paraphrase template as a separate block",
    )
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train/evaluate the order x pose x backend grid")
    _add_common(p)
    p.set_defaults(func=cmd_ablate)

    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return args.func(args)
    except VqagptError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
