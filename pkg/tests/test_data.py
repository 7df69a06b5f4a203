import logging

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from PIL import Image

from codi_iqa.data import (
    FLIVE_RESIZE, SPAQ_RESIZE, DatasetDescriptor, ManifestDataset, PreprocessConfig, ResizeRule, SplitPlan,
    efficiency_subsets, leave_one_out_plans, load_descriptor, load_manifest, make_split, normalize_labels,
    preprocess_sample, sample_rng, write_manifest,
)
from codi_iqa.errors import ConfigurationError, ManifestError
from conftest import write_label_manifest

DESC = DatasetDescriptor("synth", (0.0, 100.0), True, "synthetic")


def _manifest(tmp_path, **kw):
    return normalize_labels(load_manifest(write_label_manifest(tmp_path / "m.csv", **kw), DESC))


def test_load_csv_and_tsv(tmp_path):
    (tmp_path / "a.csv").write_text("image_ref,score\nx.png,3\ny.png,4.5\n")
    (tmp_path / "b.tsv").write_text("image_ref\tscore\tdistortion_type\nx.png\t3\tblur\n")
    a = load_manifest(tmp_path / "a.csv", DatasetDescriptor("a", (1, 5)))
    b = load_manifest(tmp_path / "b.tsv", DatasetDescriptor("b", (1, 5)))
    assert [r.raw_score for r in a.records] == [3.0, 4.5]
    assert b.records[0].distortion_type == "blur"
    assert a.image_path(a.records[0]) == tmp_path / "x.png"


def test_manifest_errors_name_rows(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("image_ref,score\nx.png,3\nx.png,4\ny.png,9\nz.png,abc\n")
    with pytest.raises(ManifestError) as err:
        load_manifest(p, DatasetDescriptor("bad", (1, 5)))
    msg = str(err.value)
    assert "row 3" in msg and "duplicate" in msg
    assert "row 4" in msg and "outside" in msg
    assert "row 5" in msg


def test_manifest_missing_columns_and_empty(tmp_path):
    (tmp_path / "m.csv").write_text("image,score\nx.png,3\n")
    with pytest.raises(ManifestError, match="missing columns"):
        load_manifest(tmp_path / "m.csv")
    (tmp_path / "e.csv").write_text("")
    with pytest.raises(ManifestError, match="empty"):
        load_manifest(tmp_path / "e.csv")


def test_synthetic_manifest_needs_content_ids(tmp_path):
    (tmp_path / "m.csv").write_text("image_ref,score\nx.png,3\n")
    with pytest.raises(ManifestError, match="content_id"):
        load_manifest(tmp_path / "m.csv", DatasetDescriptor("s", (1, 5), family="synthetic"))


def test_descriptor_file(tmp_path):
    (tmp_path / "d.yaml").write_text("name: SPAQ\nscore_range: [0, 100]\nresize: {kind: shorter_side, size: 448}\n")
    d = load_descriptor(tmp_path / "d.yaml")
    assert d.resize == SPAQ_RESIZE and d.higher_is_better
    (tmp_path / "x.yaml").write_text("- 1\n")
    with pytest.raises(ConfigurationError):
        load_descriptor(tmp_path / "x.yaml")


def test_normalization_inverts_lower_is_better(tmp_path):
    (tmp_path / "m.csv").write_text("image_ref,score\na,0\nb,2\nc,8\n")
    up = normalize_labels(load_manifest(tmp_path / "m.csv", DatasetDescriptor("u", (0, 8))))
    down = normalize_labels(load_manifest(tmp_path / "m.csv", DatasetDescriptor("d", (0, 8), False)))
    np.testing.assert_allclose(up.labels(), [0, 0.25, 1])
    np.testing.assert_allclose(down.labels(), [1, 0.75, 0])
    with pytest.raises(ManifestError):
        load_manifest(tmp_path / "m.csv", DatasetDescriptor("d", (0, 8))).labels()


def test_write_manifest_round_trip(tmp_path):
    m = load_manifest(write_label_manifest(tmp_path / "m.csv", n=30), DESC)
    again = load_manifest(write_manifest(m, tmp_path / "copy.csv"), DESC)
    assert [(r.image_ref, r.raw_score, r.content_id) for r in again.records] == \
        [(r.image_ref, r.raw_score, r.content_id) for r in m.records]


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10 ** 6), st.floats(0.1, 0.9))
def test_content_disjoint_split_property(seed, ratio):
    m = _SPLIT_MANIFEST
    tr, te = make_split(m, SplitPlan(ratio=ratio, seed=seed))
    assert not ({r.content_id for r in tr.records} & {r.content_id for r in te.records})
    assert len(tr) + len(te) == len(m)


def test_split_is_seeded(tmp_path):
    m = _manifest(tmp_path)
    a = make_split(m, SplitPlan(seed=1))
    b = make_split(m, SplitPlan(seed=1))
    c = make_split(m, SplitPlan(seed=2))
    assert a[0].records == b[0].records
    assert a[0].records != c[0].records


def test_leave_one_out_partitions(tmp_path):
    m = _manifest(tmp_path, n=240, n_types=24)
    plans = leave_one_out_plans(m)
    assert len(plans) == 24
    held = []
    for p in plans:
        tr, te = make_split(m, p)
        assert {r.distortion_type for r in te.records} == {p.held_out_distortion}
        assert len(tr) + len(te) == len(m)
        held.extend(r.image_ref for r in te.records)
    assert sorted(held) == sorted(r.image_ref for r in m.records)
    with pytest.raises(ManifestError):
        make_split(m, SplitPlan("leave-one-distortion-out", 1.0, 0, "nope"))


def test_fixed_official_split(tmp_path):
    (tmp_path / "m.csv").write_text("image_ref,score,split\na,1,train\nb,2,test\nc,3,train\n")
    m = normalize_labels(load_manifest(tmp_path / "m.csv", DatasetDescriptor("f", (0, 5))))
    tr, te = make_split(m, SplitPlan("fixed-official"))
    assert [r.image_ref for r in tr.records] == ["a", "c"] and [r.image_ref for r in te.records] == ["b"]


def test_split_plan_validation():
    with pytest.raises(ConfigurationError):
        SplitPlan("random")
    with pytest.raises(ConfigurationError):
        SplitPlan(ratio=0)
    with pytest.raises(ConfigurationError):
        SplitPlan("leave-one-distortion-out")


@pytest.mark.parametrize("nested", [True, False])
def test_efficiency_subsets(tmp_path, nested):
    m = _manifest(tmp_path, n=400)
    fractions = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7]
    test, subsets = efficiency_subsets(m, fractions, seed=3, nested=nested)
    test_ids = {r.content_id for r in test.records}
    for f, sub in zip(fractions, subsets):
        assert not test_ids & {r.content_id for r in sub.records}
        assert len(sub) == min(round(f * len(m)), len(m) - len(test))
    if nested:
        for a, b in zip(subsets, subsets[1:]):
            assert {r.image_ref for r in a.records} <= {r.image_ref for r in b.records}
    again, _ = efficiency_subsets(m, fractions, seed=3, subset_seed=9)
    assert again.records == test.records
    with pytest.raises(ConfigurationError):
        efficiency_subsets(m, [0.9])


def _png(tmp_path, w, h, seed=0):
    arr = (np.random.default_rng(seed).random((h, w, 3)) * 255).astype(np.uint8)
    p = tmp_path / f"im{w}x{h}.png"
    Image.fromarray(arr).save(p)
    return p, arr


def test_eval_preprocessing_is_centre_crop(tmp_path):
    p, arr = _png(tmp_path, 50, 40)
    x = preprocess_sample(p, "eval", PreprocessConfig(crop_size=32))
    assert x.shape == (3, 32, 32) and x.dtype == torch.float32
    expected = arr[4:36, 9:41].transpose(2, 0, 1) / 255.0
    np.testing.assert_allclose(x.numpy(), expected, atol=1e-6)


def test_train_preprocessing_reproducible(tmp_path):
    p, _ = _png(tmp_path, 60, 50)
    cfg = PreprocessConfig(crop_size=32)
    a = preprocess_sample(p, "train", cfg, sample_rng(1, 2, 3))
    b = preprocess_sample(p, "train", cfg, sample_rng(1, 2, 3))
    assert torch.equal(a, b)
    crops = {preprocess_sample(p, "train", cfg, sample_rng(1, e, 3)).sum().item() for e in range(8)}
    assert len(crops) > 1
    with pytest.raises(ValueError):
        preprocess_sample(p, "train", cfg)


def test_resize_rules(tmp_path):
    p, _ = _png(tmp_path, 40, 36)
    x = preprocess_sample(p, "eval", PreprocessConfig(crop_size=32, resize=ResizeRule("shorter_side", size=64)))
    assert x.shape == (3, 32, 32)
    x = preprocess_sample(p, "eval", PreprocessConfig(crop_size=32, resize_only=True))
    assert x.shape == (3, 32, 32)
    assert FLIVE_RESIZE.min_size == 384 and FLIVE_RESIZE.max_size == 416
    with pytest.raises(ConfigurationError):
        ResizeRule("shorter_side")


def test_small_image_upscaled_with_warning(tmp_path, caplog):
    p, _ = _png(tmp_path, 20, 24)
    with caplog.at_level(logging.WARNING):
        x = preprocess_sample(p, "eval", PreprocessConfig(crop_size=32))
    assert x.shape == (3, 32, 32)
    assert "smaller than crop" in caplog.text


def test_manifest_dataset(image_dataset):
    mpath, dpath = image_dataset
    raw = load_manifest(mpath, load_descriptor(dpath))
    with pytest.raises(ManifestError):
        ManifestDataset(raw)
    ds = ManifestDataset(normalize_labels(raw), "train", PreprocessConfig(crop_size=32), seed=4)
    x0, y0 = ds[0]
    ds.set_epoch(1)
    x1, _ = ds[0]
    ds.set_epoch(0)
    assert torch.equal(ds[0][0], x0)
    assert not torch.equal(x1, x0)
    assert x0.shape == (3, 32, 32) and 0 <= y0.item() <= 1
    assert len(ds) == len(raw)


def _split_manifest():
    import tempfile
    from pathlib import Path

    with tempfile.TemporaryDirectory() as d:
        return normalize_labels(load_manifest(write_label_manifest(Path(d) / "m.csv", n=300), DESC))


_SPLIT_MANIFEST = _split_manifest()
