"""Object-level splits, batch sampling, the Adam training loop, and checkpoints."""
import csv
import json
import logging
import math
from dataclasses import dataclass, fields

import numpy as np

from . import encoder
from .errors import InsufficientDistinctMaterials, NonFiniteActivation, NonFiniteLoss, SchemaError

log = logging.getLogger(__name__)

TRAIN = "train"
TEST = "test"


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    learning_rate: float = 1.0e-4
    steps: int = 2000
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")

    @classmethod
    def from_dict(cls, data):
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise SchemaError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**data)


# --- splits ------------------------------------------------------------------

def split_by_object(manifest, test_fraction, seed):
    """Assign whole objects to train or test; returns ``{object_id: split}``."""
    objects = manifest.object_ids()
    if not objects:
        raise ValueError("manifest has no objects to split")
    if not 0.0 <= test_fraction <= 1.0:
        raise ValueError("test_fraction must lie in [0, 1]")
    n_test = int(math.floor(test_fraction * len(objects) + 0.5))
    order = np.random.Generator(np.random.PCG64(seed)).permutation(len(objects))
    test = {objects[i] for i in order[:n_test]}
    return {o: TEST if o in test else TRAIN for o in objects}


def apply_split(manifest, assignment):
    for p in manifest.parts:
        if p.object_id not in assignment:
            raise SchemaError(f"object {p.object_id} missing from split assignment")
        p.split = assignment[p.object_id]


def save_split(assignment, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({"schema_version": 1, "assignment": assignment}, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_split(path):
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    assignment = doc.get("assignment") if isinstance(doc, dict) else None
    if not isinstance(assignment, dict) or any(v not in (TRAIN, TEST) for v in assignment.values()):
        raise SchemaError(f"{path}: not a split file")
    return assignment


# --- batches -----------------------------------------------------------------

class PartPool:
    """Training parts grouped by ground-truth material."""

    def __init__(self, manifest, split=TRAIN, condition="main"):
        index = manifest.material_index()
        by_material = {}
        for p in manifest.parts:
            if p.split == split and p.condition == condition:
                by_material.setdefault(index[p.truth_material_id], []).append(p.descriptor_row)
        self.materials = np.array(sorted(by_material), dtype=np.int64)
        self.rows = [np.array(by_material[m], dtype=np.int64) for m in self.materials]

    def __len__(self):
        return sum(len(r) for r in self.rows)


def sample_batch(pool, batch_size, rng):
    """Draw ``batch_size`` parts with pairwise-distinct materials.

    Returns ``(material_indices, descriptor_rows)``; ``rng`` is advanced.
    """
    if len(pool.materials) < batch_size:
        raise InsufficientDistinctMaterials(
            f"need {batch_size} distinct materials, split has {len(pool.materials)}")
    chosen = rng.choice(len(pool.materials), size=batch_size, replace=False)
    rows = np.array([pool.rows[c][rng.integers(len(pool.rows[c]))] for c in chosen], dtype=np.int64)
    return pool.materials[chosen], rows


# --- optimizer ---------------------------------------------------------------

class Adam:
    """AdamW with bias correction; the update runs in the parameters' dtype."""

    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        self.lr, self.beta1, self.beta2, self.eps, self.weight_decay = lr, beta1, beta2, eps, weight_decay
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for k, p in params.items():
            g = grads[k]
            dt = p.dtype.type
            self.m[k] = dt(self.beta1) * self.m[k] + dt(1.0 - self.beta1) * g
            self.v[k] = dt(self.beta2) * self.v[k] + dt(1.0 - self.beta2) * (g * g)
            update = (self.m[k] / dt(c1)) / (np.sqrt(self.v[k] / dt(c2)) + dt(self.eps))
            if self.weight_decay:
                update = update + dt(self.weight_decay) * p
            params[k] = np.asarray(p - dt(self.lr) * update)


# --- training ----------------------------------------------------------------

@dataclass
class TrainState:
    params: dict
    optimizer: Adam
    rng: np.random.Generator
    step: int
    n_heads: int


def new_state(config, init, n_heads):
    params = {k: np.array(v, dtype=np.float32) for k, v in init.items()}
    opt = Adam(params, config.learning_rate, config.beta1, config.beta2, config.eps, config.weight_decay)
    rng = np.random.Generator(np.random.PCG64(config.seed))
    return TrainState(params=params, optimizer=opt, rng=rng, step=0, n_heads=n_heads)


def train(config, manifest, init, n_heads, view_rows=None, state=None, stop_at=None, progress=None):
    """Run Adam steps on the training split until ``config.steps`` (or ``stop_at``).

    ``manifest`` must already carry a split (see :func:`apply_split`).
    ``view_rows`` restricts every material to a subset of its views. Passing a
    ``state`` from :func:`load_checkpoint` resumes a run exactly where it left
    off. Returns ``(state, history)`` with one ``(step, loss)`` row per step run.
    """
    if state is None:
        state = new_state(config, init, n_heads)
    pool = PartPool(manifest)
    views = manifest.views if view_rows is None else manifest.views[:, list(view_rows)]
    end = config.steps if stop_at is None else min(stop_at, config.steps)
    history = []
    while state.step < end:
        mats, rows = sample_batch(pool, config.batch_size, state.rng)
        try:
            loss, grads = encoder.batch_forward_backward(
                state.params, views[mats], manifest.descriptors[rows], state.n_heads)
        except NonFiniteActivation:
            raise NonFiniteLoss(state.step, float("nan")) from None
        if not math.isfinite(loss):
            raise NonFiniteLoss(state.step, loss)
        state.optimizer.step(state.params, grads)
        encoder.clamp_logit_scale(state.params)
        history.append((state.step, loss))
        state.step += 1
        if progress is not None:
            progress(state.step, loss)
    return state, history


def write_history(history, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "loss"])
        for step, loss in history:
            w.writerow([step, repr(float(loss))])


# --- checkpoints -------------------------------------------------------------
# Integer state (step counter, generator state) is stored as uint32 words
# reinterpreted as float32 so it round-trips through the tensor format bit-exactly.

def _words(values):
    return np.asarray(values, dtype=np.uint32).view(np.float32)


def _unwords(arr):
    return np.asarray(arr, dtype=np.float32).view(np.uint32)


def _int_to_words(x, n):
    return [(x >> (32 * i)) & 0xFFFFFFFF for i in range(n)]


def _words_to_int(words):
    return sum(int(w) << (32 * i) for i, w in enumerate(words))


def _rng_words(rng):
    st = rng.bit_generator.state
    if st["bit_generator"] != "PCG64":
        raise ValueError("only PCG64 generators can be checkpointed")
    return (_int_to_words(st["state"]["state"], 4) + _int_to_words(st["state"]["inc"], 4)
            + [st["has_uint32"], st["uinteger"]])


def _rng_from_words(words):
    words = [int(w) for w in words]
    bitgen = np.random.PCG64()
    bitgen.state = {
        "bit_generator": "PCG64",
        "state": {"state": _words_to_int(words[0:4]), "inc": _words_to_int(words[4:8])},
        "has_uint32": words[8], "uinteger": words[9],
    }
    return np.random.Generator(bitgen)


def save_params(params, n_heads, path):
    tensors = dict(params)
    tensors["meta.n_heads"] = _words([n_heads])
    encoder.write_tensors(path, tensors)


def load_params(path):
    """Load bare encoder parameters (ignoring optimizer state); returns ``(params, n_heads)``."""
    tensors = encoder.read_tensors(path)
    n_heads = int(_unwords(tensors["meta.n_heads"])[0])
    params = {k: v for k, v in tensors.items() if not k.startswith(("meta.", "adam.", "train."))}
    return params, n_heads


def save_checkpoint(state, path):
    tensors = dict(state.params)
    tensors["meta.n_heads"] = _words([state.n_heads])
    for k in state.params:
        tensors["adam.m." + k] = state.optimizer.m[k]
        tensors["adam.v." + k] = state.optimizer.v[k]
    tensors["train.step"] = _words([state.step])
    tensors["train.adam_t"] = _words([state.optimizer.t])
    tensors["train.rng"] = _words(_rng_words(state.rng))
    encoder.write_tensors(path, tensors)


def load_checkpoint(path, config):
    """Rebuild a :class:`TrainState` saved by :func:`save_checkpoint`.

    ``config`` supplies the optimizer hyperparameters (they are not stored).
    """
    tensors = encoder.read_tensors(path)
    n_heads = int(_unwords(tensors["meta.n_heads"])[0])
    params = {k: v for k, v in tensors.items() if not k.startswith(("meta.", "adam.", "train."))}
    opt = Adam(params, config.learning_rate, config.beta1, config.beta2, config.eps, config.weight_decay)
    if "train.step" in tensors:
        for k in params:
            opt.m[k] = tensors["adam.m." + k]
            opt.v[k] = tensors["adam.v." + k]
        opt.t = int(_unwords(tensors["train.adam_t"])[0])
        step = int(_unwords(tensors["train.step"])[0])
        rng = _rng_from_words(_unwords(tensors["train.rng"]))
    else:
        step = 0
        rng = np.random.Generator(np.random.PCG64(config.seed))
    return TrainState(params=params, optimizer=opt, rng=rng, step=step, n_heads=n_heads)
