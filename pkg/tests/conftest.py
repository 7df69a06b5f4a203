import csv
import sys
from pathlib import Path

import numpy as np
import pytest
import yaml
from PIL import Image

sys.path.insert(0, str(Path(__file__).parent))


def write_image_dataset(root, n_content=4, types=("blur", "noise"), size=48, seed=0, family="synthetic",
                        score_range=(1.0, 5.0), higher_is_better=True, name="toy"):
    """Random images plus a manifest and descriptor; returns (manifest, descriptor) paths."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    rows = []
    for c in range(n_content):
        base = rng.random((size, size, 3))
        for level, t in enumerate(types):
            img = np.clip(base + 0.1 * (level + 1) * rng.standard_normal(base.shape), 0, 1)
            ref = f"{name}_c{c}_{t}.png"
            Image.fromarray((img * 255).astype(np.uint8)).save(root / ref)
            rows.append([ref, float(rng.uniform(*score_range)), t, f"c{c}"])
    manifest = root / f"{name}.csv"
    with manifest.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["image_ref", "score", "distortion_type", "content_id"])
        w.writerows(rows)
    descriptor = root / f"{name}.yaml"
    descriptor.write_text(yaml.safe_dump({
        "name": name, "score_range": list(score_range), "higher_is_better": higher_is_better, "family": family,
    }))
    return manifest, descriptor


def write_label_manifest(path, n=200, n_types=24, per_content=None, seed=0):
    """Manifest without images (split logic only)."""
    rng = np.random.default_rng(seed)
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["image_ref", "score", "distortion_type", "content_id"])
        for i in range(n):
            content = i // per_content if per_content else int(rng.integers(0, max(2, n // 8)))
            w.writerow([f"img{i:05d}.png", float(rng.uniform(0, 100)), f"t{i % n_types:02d}", f"c{content}"])
    return Path(path)


@pytest.fixture
def image_dataset(tmp_path):
    return write_image_dataset(tmp_path / "data")


@pytest.fixture(autouse=True)
def _seed_torch():
    import torch

    torch.manual_seed(0)
