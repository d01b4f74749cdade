"""ood-extractor: extract features, emit zero-shot logits, serve the bridge.

The model cache directory can be pointed elsewhere with the
OOD_EXTRACTOR_CACHE environment variable (applied to HF_HOME/TORCH_HOME
before any backbone download).
"""

from __future__ import annotations

import argparse
import sys

from .backbones import TextEncoderUnavailable, build_backbone
from .datasets import load_dataset
from .extract import DEFAULT_PROMPT, extract_features, zero_shot_logits


def cmd_extract(args) -> int:
    backbone = build_backbone(args.backbone)
    dataset = load_dataset(args.dataset, split=args.split,
                           cache_dir=args.cache_dir)
    resize_to = tuple(args.resize_to) if args.resize_to else None
    n = extract_features(
        backbone, dataset, role=args.role, out_path=args.out,
        resize_to=resize_to, batch_size=args.batch_size,
        with_labels=not args.no_labels,
    )
    print(f"wrote {n} x {backbone.feature_dim} features to {args.out}")
    return 0


def cmd_logits(args) -> int:
    backbone = build_backbone(args.backbone)
    dataset = load_dataset(args.dataset, split=args.split,
                           cache_dir=args.cache_dir)
    if args.class_names:
        class_names = args.class_names
    elif dataset.class_names:
        class_names = dataset.class_names
    else:
        print("error: dataset has no class names; pass --class-names",
              file=sys.stderr)
        return 2
    resize_to = tuple(args.resize_to) if args.resize_to else None
    n = zero_shot_logits(
        backbone, dataset, class_names, args.out,
        prompt_template=args.prompt, resize_to=resize_to,
        batch_size=args.batch_size,
    )
    print(f"wrote {n} x {len(class_names)} zero-shot logits to {args.out}")
    return 0


def cmd_serve(args) -> int:
    from .bridge_server import serve

    backbone = build_backbone(args.backbone)
    serve(backbone)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ood-extractor",
        description="Produce embeddings and serve encoder gradients for oodkit.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--backbone", required=True,
                       help="toy[:dim[:seed]] | torchvision:<arch> | hf-clip:<repo>")
        p.add_argument("--dataset", required=True,
                       help="folder:<path> | cifar10 | cifar100")
        p.add_argument("--split", choices=("train", "test"), default="test")
        p.add_argument("--resize-to", type=int, nargs=2, metavar=("H", "W"),
                       default=None,
                       help="resize before preprocessing (OOD rule: match "
                            "the in-distribution image size)")
        p.add_argument("--batch-size", type=int, default=64)
        p.add_argument("--cache-dir", default="~/.cache/ood-extractor")
        p.add_argument("--out", required=True)

    p_extract = sub.add_parser("extract", help="write a feature container")
    common(p_extract)
    p_extract.add_argument("--role", default="in-train",
                           choices=("in-train", "in-test", "out-test"))
    p_extract.add_argument("--no-labels", action="store_true")
    p_extract.set_defaults(func=cmd_extract)

    p_logits = sub.add_parser("logits", help="write zero-shot prompt logits")
    common(p_logits)
    p_logits.add_argument("--class-names", nargs="+", default=None)
    p_logits.add_argument("--prompt", default=DEFAULT_PROMPT)
    p_logits.set_defaults(func=cmd_logits)

    p_serve = sub.add_parser("serve", help="answer bridge protocol requests on stdio")
    p_serve.add_argument("--backbone", required=True)
    p_serve.set_defaults(func=cmd_serve)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except TextEncoderUnavailable as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
