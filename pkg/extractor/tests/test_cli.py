import numpy as np
from PIL import Image

import oodkit.store as engine_store

from ood_extractor.cli import main

from test_extract import make_flat_folder, make_image_folder


def test_extract_subcommand(tmp_path, capsys):
    folder = make_image_folder(tmp_path / "data")
    out = tmp_path / "feats.oodk"
    code = main([
        "extract", "--backbone", "toy:16", "--dataset", f"folder:{folder}",
        "--role", "in-train", "--out", str(out),
    ])
    assert code == 0
    assert "wrote 8 x 16 features" in capsys.readouterr().out
    matrix, labels, _ = engine_store.read_embeddings(out)
    assert matrix.shape == (8, 16)
    assert labels.n_classes == 2


def test_extract_with_resize_rule(tmp_path):
    folder = make_flat_folder(tmp_path / "ood")
    out = tmp_path / "ood.oodk"
    code = main([
        "extract", "--backbone", "toy:16", "--dataset", f"folder:{folder}",
        "--role", "out-test", "--no-labels", "--resize-to", "24", "24",
        "--out", str(out),
    ])
    assert code == 0
    _, _, manifest = engine_store.read_embeddings(out)
    assert manifest.extra["resized_to"] == [24, 24]


def test_logits_subcommand_uses_folder_class_names(tmp_path, capsys):
    folder = make_image_folder(tmp_path / "data")
    out = tmp_path / "logits.oodk"
    code = main([
        "logits", "--backbone", "toy:16", "--dataset", f"folder:{folder}",
        "--out", str(out),
    ])
    assert code == 0
    assert "wrote 8 x 2 zero-shot logits" in capsys.readouterr().out


def test_logits_without_class_names_exits_2(tmp_path, capsys):
    folder = make_flat_folder(tmp_path / "ood")
    code = main([
        "logits", "--backbone", "toy:16", "--dataset", f"folder:{folder}",
        "--out", str(tmp_path / "x.oodk"),
    ])
    assert code == 2
    assert "class names" in capsys.readouterr().err


def test_unknown_dataset_exits_2(tmp_path, capsys):
    code = main([
        "extract", "--backbone", "toy:16", "--dataset", "mnist",
        "--out", str(tmp_path / "x.oodk"),
    ])
    assert code == 2
    assert "unknown dataset" in capsys.readouterr().err


def test_unknown_backbone_exits_2(tmp_path, capsys):
    folder = make_image_folder(tmp_path / "data")
    code = main([
        "extract", "--backbone", "vgg", "--dataset", f"folder:{folder}",
        "--out", str(tmp_path / "x.oodk"),
    ])
    assert code == 2


def test_end_to_end_with_engine_cli(tmp_path):
    """extract (toy backbone) -> oodkit eval nn gives a valid AUROC."""
    from oodkit.cli import main as engine_main

    rng = np.random.default_rng(5)
    base = rng.integers(80, 150, size=(24, 24, 3), dtype=np.uint8)

    def blobby_folder(root, n, jitter, seed):
        root.mkdir(parents=True)
        r = np.random.default_rng(seed)
        for i in range(n):
            noise = r.integers(-jitter, jitter + 1, size=base.shape)
            arr = np.clip(base.astype(int) + noise, 0, 255).astype(np.uint8)
            Image.fromarray(arr).save(root / f"{i}.png")

    def random_folder(root, n, seed):
        root.mkdir(parents=True)
        r = np.random.default_rng(seed)
        for i in range(n):
            arr = r.integers(0, 256, size=base.shape, dtype=np.uint8)
            Image.fromarray(arr).save(root / f"{i}.png")

    blobby_folder(tmp_path / "train", 30, 10, 1)
    blobby_folder(tmp_path / "in", 10, 10, 2)
    random_folder(tmp_path / "out", 10, 3)

    paths = {}
    for split, role in (("train", "in-train"), ("in", "in-test"),
                        ("out", "out-test")):
        paths[split] = tmp_path / f"{split}.oodk"
        assert main([
            "extract", "--backbone", "toy:32", "--dataset",
            f"folder:{tmp_path / split}", "--role", role, "--no-labels",
            "--resize-to", "24", "24", "--out", str(paths[split]),
        ]) == 0

    json_path = tmp_path / "report.json"
    assert engine_main([
        "eval", "--in-train", str(paths["train"]),
        "--in-test", str(paths["in"]), "--out-test", str(paths["out"]),
        "--score", "nn", "--json", str(json_path),
    ]) == 0
    import json
    auroc = json.loads(json_path.read_text())["rows"][0]["auroc"]
    assert auroc > 0.9  # near-duplicates of the base image score higher
