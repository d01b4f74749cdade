"""Command-line surface: evaluate scores, train probes, run attacks.

Exit codes: 0 success, 2 contract violation (missing labels, bad flags,
invalid containers), 3 data mismatch (incompatible dimensions), 4 bridge
failure, 1 anything else.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import adversarial, probe, scores, store
from .bridge import BridgeEncoder, BridgeError
from .metrics import EvalReport, auroc, knn_accuracy

EXIT_OK = 0
EXIT_CONTRACT = 2
EXIT_MISMATCH = 3
EXIT_BRIDGE = 4

LABELED_SCORES = ("md", "rmd", "rmd-logits")


def _load_features(path: str, *, need_labels: bool = False, score: str = ""):
    matrix, labels, manifest = store.read_embeddings(path)
    if need_labels and labels is None:
        raise store.InvariantViolationError(
            f"score '{score}' requires labels, but {path} has none"
        )
    return matrix, labels, manifest


def _emit_report(report: EvalReport, json_path: str | None) -> None:
    print(report.to_text())
    if json_path:
        Path(json_path).write_text(report.to_json() + "\n", encoding="utf-8")


def _warn_on_resize_mismatch(in_manifest, out_manifest) -> None:
    # Detection can shortcut on resolution differences; extractors record any
    # applied resize so mismatched provenance is at least visible.
    in_resize = in_manifest.extra.get("resized_to")
    out_resize = out_manifest.extra.get("resized_to")
    if in_resize != out_resize:
        print(
            f"warning: resize provenance differs (in-test {in_resize}, "
            f"out-test {out_resize}); scores may reflect resolution, not content",
            file=sys.stderr,
        )


def cmd_eval(args) -> int:
    score = args.score
    need_train = score not in ("msp",)
    need_labels = score in LABELED_SCORES

    train = train_labels = None
    if need_train:
        if not args.in_train:
            raise store.InvariantViolationError(f"score '{score}' requires --in-train")
        train, train_labels, _ = _load_features(
            args.in_train, need_labels=need_labels, score=score
        )
    in_test, _, in_manifest = store.read_embeddings(args.in_test)
    out_test, _, out_manifest = store.read_embeddings(args.out_test)
    _warn_on_resize_mismatch(in_manifest, out_manifest)

    if args.normalize and score in ("nn", "md", "rmd", "kmeans-md"):
        train = scores.normalize_rows(train) if train is not None else None
        in_test = scores.normalize_rows(in_test)
        out_test = scores.normalize_rows(out_test)

    start = time.perf_counter()
    if score == "nn":
        s_in = scores.nn_score(train, in_test)
        s_out = scores.nn_score(train, out_test)
    elif score in ("md", "rmd", "rmd-logits"):
        stats = scores.fit_gaussian_stats(train, train_labels, epsilon=args.epsilon)
        fn = scores.md_score if score == "md" else scores.rmd_score
        s_in = scores.ScoreVector(fn(stats, in_test).scores, score)
        s_out = scores.ScoreVector(fn(stats, out_test).scores, score)
    elif score == "kmeans-md":
        s_in = scores.kmeans_md_score(train, in_test, args.kmeans_k,
                                      epsilon=args.epsilon, seed=args.seed)
        s_out = scores.kmeans_md_score(train, out_test, args.kmeans_k,
                                       epsilon=args.epsilon, seed=args.seed)
    elif score == "msp":
        s_in = scores.msp_score(in_test)
        s_out = scores.msp_score(out_test)
    else:  # pragma: no cover - argparse restricts choices
        raise ValueError(f"unknown score {score}")
    runtime_ms = 1000.0 * (time.perf_counter() - start)

    result = auroc(s_in, s_out)
    report = EvalReport()
    report.add(in_manifest.name, out_manifest.name, score, result.auroc, runtime_ms)
    _emit_report(report, args.json)
    return EXIT_OK


def _probe_config(args, default_steps: int) -> probe.ProbeConfig:
    return probe.ProbeConfig(
        steps=args.steps if args.steps is not None else default_steps,
        batch_size=args.batch_size,
        weight_decay=args.wd,
        lr_start=args.lr_start,
        lr_end=args.lr_end,
        seed=args.seed,
    )


def cmd_probe(args) -> int:
    train, train_labels, train_manifest = store.read_embeddings(args.in_train)
    in_test, _, in_manifest = store.read_embeddings(args.in_test)
    out_test, _, out_manifest = store.read_embeddings(args.out_test)

    if args.pseudo_logits:
        logits, _, _ = store.read_embeddings(args.pseudo_logits)
        if logits.shape[0] != train.shape[0]:
            raise scores.DimensionMismatchError(
                f"{logits.shape[0]} pseudo-logit rows for {train.shape[0]} train samples"
            )
        kept = probe.pseudo_label_filter(logits, args.threshold)
        print(
            f"pseudo-labels: kept {len(kept.kept_indices)} of {train.shape[0]} "
            f"samples (threshold {args.threshold})"
        )
        if len(kept.kept_indices) == 0:
            raise store.InvariantViolationError(
                "no samples pass the pseudo-label confidence threshold"
            )
        covered = len(np.unique(kept.pseudo_labels))
        if covered < logits.shape[1]:
            raise store.InvariantViolationError(
                f"pseudo-labels cover only {covered} of {logits.shape[1]} "
                "classes; probing needs every class present"
            )
        train = train[kept.kept_indices]
        train_labels = store.LabelVector(kept.pseudo_labels, logits.shape[1])
    elif train_labels is None:
        raise store.InvariantViolationError(
            "probe training requires labels (or --pseudo-logits)"
        )

    start = time.perf_counter()
    if args.few_shot_p is not None:
        # Few-shot protocol: 5 seeded runs, mean AUROC, shorter schedule.
        config = _probe_config(args, default_steps=10_000)
        aurocs = []
        head = None
        for run in range(5):
            run_seed = args.seed + run
            subset = probe.few_shot_select(train_labels, args.few_shot_p, seed=run_seed)
            run_config = probe.ProbeConfig(
                steps=config.steps, batch_size=config.batch_size,
                weight_decay=config.weight_decay, lr_start=config.lr_start,
                lr_end=config.lr_end, seed=run_seed,
            )
            sub_labels = store.LabelVector(train_labels.labels[subset],
                                           train_labels.n_classes)
            run_head = probe.train_probe(train[subset], sub_labels, run_config)
            s_in, s_out = probe.evaluate_probe(
                run_head, in_test, out_test, args.score,
                train_features=train[subset], train_labels=sub_labels,
                epsilon=args.epsilon,
            )
            aurocs.append(auroc(s_in, s_out).auroc)
            if head is None:
                head = run_head
        mean_auroc = float(np.mean(aurocs))
        print(f"few-shot p={args.few_shot_p}: AUROCs over 5 runs: "
              + ", ".join(f"{a:.4f}" for a in aurocs))
    else:
        config = _probe_config(args, default_steps=20_000)
        head = probe.train_probe(train, train_labels, config)
        accuracy = probe.probe_accuracy(head, train, train_labels)
        print(f"probe training accuracy: {accuracy:.4f}")
        s_in, s_out = probe.evaluate_probe(
            head, in_test, out_test, args.score,
            train_features=train, train_labels=train_labels, epsilon=args.epsilon,
        )
        mean_auroc = auroc(s_in, s_out).auroc
    runtime_ms = 1000.0 * (time.perf_counter() - start)

    head_path = args.head_out or str(Path(args.in_train).with_suffix("")) + "-head.oodk"
    probe.write_linear_head(head, head_path, name=f"{train_manifest.name}-head")
    print(f"linear head written to {head_path}")

    report = EvalReport()
    report.add(in_manifest.name, out_manifest.name, args.score, mean_auroc, runtime_ms)
    _emit_report(report, args.json)
    return EXIT_OK


def cmd_attack(args) -> int:
    out_images, out_manifest = store.read_images(args.out_images)
    in_images, _ = store.read_images(args.in_images)
    if out_images.shape[1:] != in_images.shape[1:]:
        raise scores.DimensionMismatchError(
            f"image shapes differ: {out_images.shape[1:]} vs {in_images.shape[1:]}"
        )

    shape = tuple(out_images.shape[1:])
    if args.encoder == "toy":
        encoder = adversarial.ToyEncoder(image_shape=shape)
        closer = None
    elif args.encoder.startswith("bridge:"):
        encoder = BridgeEncoder(args.encoder[len("bridge:"):])
        closer = encoder
    else:
        raise store.InvariantViolationError(
            f"--encoder must be 'toy' or 'bridge:<command>', got {args.encoder!r}"
        )

    config = adversarial.AttackConfig(
        steps=args.steps if args.steps is not None else 250,
        lr=args.lr, lambda_smooth=args.lam, seed=args.seed,
    )
    try:
        results, target_indices = adversarial.build_adversarial_dataset(
            list(out_images), list(in_images), encoder, config, seed=args.seed,
        )
    finally:
        if closer is not None:
            closer.close()

    suffix = "-A" if args.lam == 0 else "-AS"
    base = Path(args.out or f"{Path(args.out_images).with_suffix('')}{suffix}.oodk")
    perturbed = np.stack([r.perturbed_image for r in results]).astype(np.float32)
    store.write_images(
        perturbed,
        store.Manifest(name=f"{out_manifest.name}{suffix}", role="out-test",
                       extractor=out_manifest.extractor,
                       extra={"attack_lambda": args.lam, "attack_steps": config.steps,
                              "attack_seed": args.seed}),
        base,
    )
    targets_path = args.targets_out or str(base.with_suffix("")) + "-targets.json"
    Path(targets_path).write_text(json.dumps({
        "target_indices": [int(t) for t in target_indices],
        "seed": args.seed,
        "lambda": args.lam,
    }, indent=2) + "\n", encoding="utf-8")

    n_success = sum(r.success for r in results)
    mean_gain = float(np.mean([r.final_similarity - r.initial_similarity
                               for r in results]))
    print(f"adversarial images written to {base}")
    print(f"target indices written to {targets_path}")
    print(f"attacks: {n_success}/{len(results)} improved similarity "
          f"(mean gain {mean_gain:.4f})")
    return EXIT_OK


def cmd_knn_acc(args) -> int:
    train, train_labels, _ = _load_features(args.in_train, need_labels=True,
                                            score="knn-acc")
    test, test_labels, _ = _load_features(args.test, need_labels=True,
                                          score="knn-acc")
    preds = scores.knn_classify(train, train_labels, test, args.k)
    accuracy = knn_accuracy(preds, test_labels)
    print(f"knn-accuracy: {accuracy:.4f} (k={args.k})")
    return EXIT_OK


def cmd_report(args) -> int:
    merged = EvalReport()
    for path in args.reports:
        part = EvalReport.from_json(Path(path).read_text(encoding="utf-8"))
        merged.rows.extend(part.rows)
    print(merged.to_text())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="oodkit",
        description="OOD-detection evaluation on precomputed embeddings.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--json", default=None, help="also write a JSON report here")

    p_eval = sub.add_parser("eval", help="score a (in-train, in-test, out-test) triple")
    p_eval.add_argument("--in-train", default=None)
    p_eval.add_argument("--in-test", required=True)
    p_eval.add_argument("--out-test", required=True)
    p_eval.add_argument("--score", required=True, choices=scores.SCORE_KINDS)
    p_eval.add_argument("--epsilon", type=float, default=None,
                        help="covariance regularization (default: auto)")
    p_eval.add_argument("--kmeans-k", type=int, default=5)
    p_eval.add_argument("--normalize", action="store_true",
                        help="L2-normalize features before fitting/scoring")
    add_common(p_eval)
    p_eval.set_defaults(func=cmd_eval)

    p_probe = sub.add_parser("probe", help="train and evaluate a linear head")
    p_probe.add_argument("--in-train", required=True)
    p_probe.add_argument("--in-test", required=True)
    p_probe.add_argument("--out-test", required=True)
    p_probe.add_argument("--score", default="msp", choices=("msp", "rmd-logits"))
    p_probe.add_argument("--steps", type=int, default=None,
                         help="default 20000 (10000 for few-shot)")
    p_probe.add_argument("--batch-size", type=int, default=256)
    p_probe.add_argument("--wd", type=float, default=1e-2)
    p_probe.add_argument("--lr-start", type=float, default=1e-3)
    p_probe.add_argument("--lr-end", type=float, default=1e-6)
    p_probe.add_argument("--few-shot-p", type=int, default=None)
    p_probe.add_argument("--pseudo-logits", default=None,
                         help="zero-shot logits container for pseudo-labeling")
    p_probe.add_argument("--threshold", type=float, default=0.9)
    p_probe.add_argument("--epsilon", type=float, default=None)
    p_probe.add_argument("--head-out", default=None)
    add_common(p_probe)
    p_probe.set_defaults(func=cmd_probe)

    p_attack = sub.add_parser("attack", help="build an adversarial OOD dataset")
    p_attack.add_argument("--out-images", required=True)
    p_attack.add_argument("--in-images", required=True)
    p_attack.add_argument("--encoder", default="toy",
                          help="'toy' or 'bridge:<command>'")
    p_attack.add_argument("--steps", type=int, default=None)
    p_attack.add_argument("--lr", type=float, default=1e-3)
    p_attack.add_argument("--lambda", dest="lam", type=float, default=0.0)
    p_attack.add_argument("--out", default=None,
                          help="output container (default: <out-images>-A/-AS)")
    p_attack.add_argument("--targets-out", default=None)
    add_common(p_attack)
    p_attack.set_defaults(func=cmd_attack)

    p_knn = sub.add_parser("knn-acc", help="top-k NN classification accuracy")
    p_knn.add_argument("--in-train", required=True)
    p_knn.add_argument("--test", required=True)
    p_knn.add_argument("--k", type=int, default=20)
    add_common(p_knn)
    p_knn.set_defaults(func=cmd_knn_acc)

    p_report = sub.add_parser("report", help="render JSON reports as a table")
    p_report.add_argument("reports", nargs="+")
    p_report.set_defaults(func=cmd_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except scores.DimensionMismatchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISMATCH
    except BridgeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BRIDGE
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONTRACT
    except (store.ContainerError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONTRACT
    except Exception as exc:  # noqa: BLE001
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
