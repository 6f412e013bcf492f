import json
from dataclasses import replace

import numpy as np
import pytest
from conftest import SMALL

from matembed.errors import BadMagic, SchemaError, ShapeMismatch
from matembed.synthdata import (
    SynthConfig,
    generate,
    load_manifest,
    read_matrix,
    view_subset,
    write_matrix,
)


def test_default_grid_has_42_views(tmp_path):
    cfg = SynthConfig(n_materials=2, n_objects=2, parts_per_object=1, seed=0)
    m = generate(cfg, tmp_path)
    assert cfg.n_views == 42
    assert m.views.shape == (2, 42, 32)
    assert read_matrix(tmp_path / m.view_files[0]).shape == (42, 32)


def test_same_seed_byte_identical(tmp_path):
    for run in ("a", "b"):
        generate(SMALL, tmp_path / run)
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert files
    for rel in files:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()


def test_identity_maps_collapse_views(tmp_path):
    cfg = replace(SMALL, view_noise_sigma=0.0, identity_maps=True)
    m = generate(cfg, tmp_path)
    for mat in range(cfg.n_materials):
        views = m.views[mat]
        np.testing.assert_allclose(views, np.broadcast_to(views[0], views.shape), atol=1e-7)
        # unit latent padded with zeros
        assert np.allclose(views[0, cfg.d_lat:], 0.0)
        assert abs(np.linalg.norm(views[0]) - 1) < 1e-6


def test_vectors_unit_norm(small_dataset_dir):
    m = load_manifest(small_dataset_dir / "manifest.json")
    assert np.abs(np.linalg.norm(m.views, axis=2) - 1).max() <= 1e-6
    assert np.abs(np.linalg.norm(m.descriptors, axis=1) - 1).max() <= 1e-6


def test_counts_match_config(small_dataset_dir):
    m = load_manifest(small_dataset_dir / "manifest.json")
    cfg = m.config
    assert len(m.object_ids()) == cfg.n_objects
    per_object = cfg.parts_per_object + 2 * cfg.unseen_parts_per_object
    assert len(m.parts) == cfg.n_objects * per_object
    assert sum(p.condition == "main" for p in m.parts) == cfg.n_objects * cfg.parts_per_object
    for obj in m.object_ids():
        mats = [p.truth_material_id for p in m.parts if p.object_id == obj]
        assert len(set(mats)) == len(mats)
    unseen = [p for p in m.parts if p.condition == "unseen_shape"]
    assert all(p.shape == cfg.n_shapes for p in unseen)
    assert all(p.env == cfg.n_env for p in m.parts if p.condition == "unseen_lighting")


def test_roundtrip_preserves_records(tmp_path):
    generated = generate(SMALL, tmp_path)
    loaded = load_manifest(tmp_path / "manifest.json")
    assert loaded.config == generated.config
    assert loaded.material_ids == generated.material_ids
    assert loaded.parts == generated.parts
    assert loaded.views.tobytes() == generated.views.tobytes()
    assert loaded.descriptors.tobytes() == generated.descriptors.tobytes()


def test_missing_view_file_names_material(tmp_path):
    m = generate(SMALL, tmp_path)
    (tmp_path / m.view_files[3]).unlink()
    with pytest.raises(ShapeMismatch, match=m.material_ids[3]):
        load_manifest(tmp_path / "manifest.json")


def test_wrong_view_shape(tmp_path):
    m = generate(SMALL, tmp_path)
    write_matrix(tmp_path / m.view_files[0], np.ones((3, SMALL.d_in)))
    with pytest.raises(ShapeMismatch, match="n_env"):
        load_manifest(tmp_path / "manifest.json")


def test_hand_built_manifest(tmp_path):
    cfg = {"n_materials": 1, "n_objects": 1, "parts_per_object": 1, "n_env": 2, "n_shapes": 3,
           "d_lat": 2, "d_in": 4}
    views = np.eye(6, 4)
    views[4:] = [0.5, 0.5, 0.5, 0.5]
    (tmp_path / "v").mkdir()
    write_matrix(tmp_path / "v" / "only.mceb", views)
    write_matrix(tmp_path / "parts.mceb", np.array([[0.0, 1.0, 0.0, 0.0]]))
    doc = {
        "schema_version": 1, "config": cfg, "descriptor_file": "parts.mceb",
        "materials": [{"material_id": "only", "view_file": "v/only.mceb"}],
        "parts": [{"sample_id": "p0", "object_id": "o0", "truth_material_id": "only",
                   "descriptor_row": 0, "env": 1, "shape": 2}],
    }
    (tmp_path / "manifest.json").write_text(json.dumps(doc))
    m = load_manifest(tmp_path / "manifest.json")
    assert m.n_views == 6 and m.parts[0].condition == "main"

    write_matrix(tmp_path / "v" / "only.mceb", views[:5])
    with pytest.raises(ShapeMismatch):
        load_manifest(tmp_path / "manifest.json")

    write_matrix(tmp_path / "v" / "only.mceb", views)
    doc["parts"][0]["truth_material_id"] = "ghost"
    (tmp_path / "manifest.json").write_text(json.dumps(doc))
    with pytest.raises(SchemaError):
        load_manifest(tmp_path / "manifest.json")

    doc["schema_version"] = 99
    (tmp_path / "manifest.json").write_text(json.dumps(doc))
    with pytest.raises(SchemaError):
        load_manifest(tmp_path / "manifest.json")


def test_mceb_layout(tmp_path):
    path = tmp_path / "m.mceb"
    write_matrix(path, np.arange(6).reshape(2, 3))
    raw = path.read_bytes()
    assert raw[:4] == b"MCEB"
    assert [int.from_bytes(raw[i:i + 4], "little") for i in (4, 8, 12)] == [1, 2, 3]
    assert np.frombuffer(raw[16:], dtype="<f4").tolist() == [0, 1, 2, 3, 4, 5]
    path.write_bytes(b"NOPE" + raw[4:])
    with pytest.raises(BadMagic):
        read_matrix(path)


def test_view_subset_indices():
    assert view_subset(3, 2, 3, 2) == list(range(6))
    assert view_subset(3, 2, 1, 1) == [0]
    assert view_subset(3, 2, 2, 1) == [0, 2]
    with pytest.raises(ValueError):
        view_subset(3, 2, 4, 1)


def test_config_validation():
    with pytest.raises(ValueError):
        SynthConfig(n_materials=0)
    with pytest.raises(ValueError):
        SynthConfig(view_noise_sigma=-1)
    with pytest.raises(SchemaError):
        SynthConfig.from_dict({"bogus": 1})
