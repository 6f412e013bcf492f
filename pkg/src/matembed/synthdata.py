"""Synthetic stand-in for the rendered material/part dataset.

Each material has a Gaussian latent. Every (environment, shape) cell owns a
fixed affine map from latent space to feature space, shared by all materials;
a material's view feature in that cell is the normalized image of its latent
plus a little noise. A part is one random cell's feature contaminated by a
context vector belonging to its object, drawn from a fixed low-rank subspace
and scaled by ``part_nuisance_sigma``. Raw cosine matching is dominated by that
context, while a learned part encoder can project it away.

Cell maps factor as ``A[e, s] = L[e] @ S[s]`` (lighting after shape), which
lets the generator also emit parts seen through a held-out shape map or a
held-out lighting map for the generalization conditions.
"""
import json
import os
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .errors import BadMagic, SchemaError, ShapeMismatch, VersionMismatch

EMB_MAGIC = b"MCEB"
EMB_VERSION = 1
MANIFEST_SCHEMA = 1

CONDITIONS = ("main", "unseen_shape", "unseen_lighting")


def write_matrix(path, matrix):
    """Write a 2-D float32 matrix as MCEB: magic, u32 version, u32 rows, u32 cols, payload."""
    m = np.asarray(matrix, dtype=np.float32)
    if m.ndim != 2:
        raise ShapeMismatch(f"MCEB holds 2-D matrices, got shape {m.shape}")
    with open(path, "wb") as fh:
        fh.write(EMB_MAGIC + struct.pack("<III", EMB_VERSION, *m.shape))
        fh.write(np.ascontiguousarray(m).astype("<f4").tobytes())


def read_matrix(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 16 or data[:4] != EMB_MAGIC:
        raise BadMagic(f"{path}: not an MCEB file")
    version, rows, cols = struct.unpack_from("<III", data, 4)
    if version != EMB_VERSION:
        raise VersionMismatch(f"{path}: MCEB version {version}, expected {EMB_VERSION}")
    if len(data) != 16 + 4 * rows * cols:
        raise ShapeMismatch(f"{path}: payload size does not match {rows}x{cols}")
    return np.frombuffer(data, dtype="<f4", offset=16).astype(np.float32).reshape(rows, cols)


@dataclass(frozen=True)
class SynthConfig:
    n_materials: int = 64
    n_objects: int = 256
    parts_per_object: int = 4
    n_env: int = 7
    n_shapes: int = 6
    d_lat: int = 16
    d_in: int = 32
    view_noise_sigma: float = 0.05
    part_nuisance_sigma: float = 0.3
    seed: int = 0
    # nuisance-model knobs
    d_context: int = 8
    shape_strength: float = 0.5
    env_strength: float = 0.5
    env_offset_sigma: float = 0.1
    unseen_parts_per_object: int = 1
    identity_maps: bool = False

    def __post_init__(self):
        for name in ("n_materials", "n_objects", "parts_per_object", "n_env", "n_shapes", "d_lat", "d_in", "d_context"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.unseen_parts_per_object < 0:
            raise ValueError("unseen_parts_per_object must be >= 0")
        for name in ("view_noise_sigma", "part_nuisance_sigma", "shape_strength", "env_strength", "env_offset_sigma"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.parts_per_object > self.n_materials:
            raise ValueError("parts_per_object cannot exceed n_materials (parts of one object use distinct materials)")
        if self.identity_maps and self.d_in < self.d_lat:
            raise ValueError("identity_maps needs d_in >= d_lat")

    @property
    def n_views(self):
        return self.n_env * self.n_shapes

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise SchemaError(f"unknown synth config keys: {sorted(unknown)}")
        return cls(**data)


@dataclass
class PartSample:
    sample_id: str
    object_id: str
    truth_material_id: str
    descriptor_row: int
    env: int
    shape: int
    condition: str = "main"
    split: str | None = None


@dataclass
class DatasetManifest:
    """Manifest records plus the validated arrays they point at."""

    config: SynthConfig
    material_ids: list
    view_files: list
    parts: list
    descriptor_file: str
    views: np.ndarray = field(repr=False)
    descriptors: np.ndarray = field(repr=False)
    root: Path | None = None
    split_file: str | None = None

    @property
    def n_views(self):
        return self.views.shape[1]

    def object_ids(self):
        return sorted({p.object_id for p in self.parts})

    def material_index(self):
        return {m: i for i, m in enumerate(self.material_ids)}


def _cell_maps(cfg, rng):
    """Per-shape latent maps, per-environment output maps and offsets."""
    eye = np.eye(cfg.d_lat)
    base = rng.normal(0.0, 1.0 / np.sqrt(cfg.d_lat), size=(cfg.d_in, cfg.d_lat))

    def shape_map():
        return eye + cfg.shape_strength * rng.normal(0.0, 1.0 / np.sqrt(cfg.d_lat), size=(cfg.d_lat, cfg.d_lat))

    def env_map():
        lin = base + cfg.env_strength * rng.normal(0.0, 1.0 / np.sqrt(cfg.d_lat), size=(cfg.d_in, cfg.d_lat))
        return lin, rng.normal(0.0, cfg.env_offset_sigma, size=cfg.d_in)

    shapes = [shape_map() for _ in range(cfg.n_shapes + 1)]
    envs = [env_map() for _ in range(cfg.n_env + 1)]
    if cfg.identity_maps:
        lift = np.zeros((cfg.d_in, cfg.d_lat))
        lift[: cfg.d_lat] = eye
        shapes = [eye] * len(shapes)
        envs = [(lift, np.zeros(cfg.d_in))] * len(envs)
    # the last shape and environment are held out of the view grid
    return shapes, envs


def generate(config, out_dir):
    """Write a synthetic dataset under ``out_dir`` and return its manifest."""
    cfg = config
    out = Path(out_dir)
    (out / "materials").mkdir(parents=True, exist_ok=True)
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    shapes, envs = _cell_maps(cfg, rng)
    context = rng.normal(size=(cfg.d_in, cfg.d_context))

    def feature(z, e, s, noise):
        lin, offset = envs[e]
        raw = lin @ (shapes[s] @ z) + offset
        if noise > 0:
            raw = raw + rng.normal(0.0, noise, size=cfg.d_in)
        return raw / np.linalg.norm(raw)

    latents = rng.normal(size=(cfg.n_materials, cfg.d_lat))
    material_ids = [f"mat{i:04d}" for i in range(cfg.n_materials)]
    views = np.empty((cfg.n_materials, cfg.n_views, cfg.d_in))
    for m in range(cfg.n_materials):
        for e in range(cfg.n_env):
            for s in range(cfg.n_shapes):
                views[m, e * cfg.n_shapes + s] = feature(latents[m], e, s, cfg.view_noise_sigma)

    parts = []
    descriptors = []
    held_shape, held_env = cfg.n_shapes, cfg.n_env
    for o in range(cfg.n_objects):
        object_id = f"obj{o:04d}"
        ctx = context @ rng.normal(size=cfg.d_context)
        n_total = cfg.parts_per_object + (len(CONDITIONS) - 1) * cfg.unseen_parts_per_object
        mats = rng.choice(cfg.n_materials, size=min(n_total, cfg.n_materials), replace=False)
        plan = [("main", None, None)] * cfg.parts_per_object
        plan += [("unseen_shape", None, held_shape)] * cfg.unseen_parts_per_object
        plan += [("unseen_lighting", held_env, None)] * cfg.unseen_parts_per_object
        for j, (condition, e_fixed, s_fixed) in enumerate(plan):
            m = int(mats[j % len(mats)])
            e = int(rng.integers(cfg.n_env)) if e_fixed is None else e_fixed
            s = int(rng.integers(cfg.n_shapes)) if s_fixed is None else s_fixed
            base = feature(latents[m], e, s, cfg.view_noise_sigma)
            desc = base + cfg.part_nuisance_sigma * ctx
            descriptors.append(desc / np.linalg.norm(desc))
            parts.append(PartSample(
                sample_id=f"part{len(parts):05d}", object_id=object_id, truth_material_id=material_ids[m],
                descriptor_row=len(parts), env=e, shape=s, condition=condition,
            ))

    view_files = []
    for m, mid in enumerate(material_ids):
        rel = f"materials/{mid}.mceb"
        write_matrix(out / rel, views[m])
        view_files.append(rel)
    write_matrix(out / "parts.mceb", np.asarray(descriptors))
    manifest = DatasetManifest(
        config=cfg, material_ids=material_ids, view_files=view_files, parts=parts,
        descriptor_file="parts.mceb", views=views.astype(np.float32),
        descriptors=np.asarray(descriptors, dtype=np.float32), root=out,
    )
    save_manifest(manifest, out / "manifest.json")
    return manifest


def manifest_dict(manifest):
    return {
        "schema_version": MANIFEST_SCHEMA,
        "config": asdict(manifest.config),
        "materials": [{"material_id": m, "view_file": f} for m, f in zip(manifest.material_ids, manifest.view_files)],
        "descriptor_file": manifest.descriptor_file,
        "split_file": manifest.split_file,
        "parts": [
            {k: v for k, v in asdict(p).items() if k != "split"} for p in manifest.parts
        ],
    }


def save_manifest(manifest, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest_dict(manifest), fh, indent=1)
        fh.write("\n")


def _require(obj, key, kind, where):
    if not isinstance(obj, dict) or key not in obj:
        raise SchemaError(f"{where}: missing field {key!r}")
    value = obj[key]
    if not isinstance(value, kind) or isinstance(value, bool) and kind is not bool:
        raise SchemaError(f"{where}: field {key!r} has wrong type {type(value).__name__}")
    return value


def load_manifest(path):
    """Parse a manifest and load every referenced array, validating shapes."""
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"{path}: invalid JSON ({exc})") from None
    root = path.parent
    version = _require(doc, "schema_version", int, str(path))
    if version != MANIFEST_SCHEMA:
        raise SchemaError(f"{path}: schema_version {version}, expected {MANIFEST_SCHEMA}")
    try:
        cfg = SynthConfig.from_dict(_require(doc, "config", dict, str(path)))
    except (TypeError, ValueError) as exc:
        raise SchemaError(f"{path}: bad config ({exc})") from None

    material_ids, view_files, views = [], [], []
    for i, rec in enumerate(_require(doc, "materials", list, str(path))):
        mid = _require(rec, "material_id", str, f"materials[{i}]")
        rel = _require(rec, "view_file", str, f"materials[{i}]")
        if not os.path.exists(root / rel):
            raise ShapeMismatch(f"material {mid}: view file {rel} not found")
        arr = read_matrix(root / rel)
        if arr.shape != (cfg.n_views, cfg.d_in):
            raise ShapeMismatch(
                f"material {mid}: views are {arr.shape}, expected ({cfg.n_views}, {cfg.d_in}) = n_env*n_shapes x d_in")
        if not np.all(np.isfinite(arr)):
            raise ShapeMismatch(f"material {mid}: non-finite view features")
        material_ids.append(mid)
        view_files.append(rel)
        views.append(arr)
    if not material_ids:
        raise SchemaError(f"{path}: no materials")
    if len(set(material_ids)) != len(material_ids):
        raise SchemaError(f"{path}: duplicate material ids")

    desc_file = _require(doc, "descriptor_file", str, str(path))
    if not os.path.exists(root / desc_file):
        raise ShapeMismatch(f"descriptor file {desc_file} not found")
    descriptors = read_matrix(root / desc_file)
    if descriptors.shape[1] != cfg.d_in or not np.all(np.isfinite(descriptors)):
        raise ShapeMismatch(f"{desc_file}: descriptors are {descriptors.shape}, expected (*, {cfg.d_in}) and finite")

    known = set(material_ids)
    parts = []
    for i, rec in enumerate(_require(doc, "parts", list, str(path))):
        where = f"parts[{i}]"
        sample = PartSample(
            sample_id=_require(rec, "sample_id", str, where),
            object_id=_require(rec, "object_id", str, where),
            truth_material_id=_require(rec, "truth_material_id", str, where),
            descriptor_row=_require(rec, "descriptor_row", int, where),
            env=_require(rec, "env", int, where),
            shape=_require(rec, "shape", int, where),
            condition=rec.get("condition", "main"),
        )
        if sample.truth_material_id not in known:
            raise SchemaError(f"{where}: unknown material {sample.truth_material_id}")
        if not 0 <= sample.descriptor_row < len(descriptors):
            raise ShapeMismatch(f"{where}: descriptor row {sample.descriptor_row} out of range")
        if sample.condition not in CONDITIONS:
            raise SchemaError(f"{where}: unknown condition {sample.condition!r}")
        parts.append(sample)

    return DatasetManifest(
        config=cfg, material_ids=material_ids, view_files=view_files, parts=parts,
        descriptor_file=desc_file, views=np.stack(views), descriptors=descriptors,
        root=root, split_file=doc.get("split_file"),
    )


def view_subset(n_env, n_shapes, env_count, shape_count):
    """Row indices of the first ``env_count`` environments x first ``shape_count`` shapes."""
    if not (1 <= env_count <= n_env and 1 <= shape_count <= n_shapes):
        raise ValueError(f"subset ({shape_count} shapes, {env_count} envs) outside the {n_shapes}x{n_env} grid")
    return [e * n_shapes + s for e in range(env_count) for s in range(shape_count)]
