"""Command-line entry point: ``matembed <subcommand> ...``.

Exit status is 0 on success, 1 on a runtime or IO error (one line on stderr),
and 2 on a usage error. Files written by a failing command are removed.
"""
import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import descriptor, encoder, imageio, maskcrop, retrieval, subspace, synthdata, trainer
from .errors import MatEmbedError, SchemaError

log = logging.getLogger("matembed")


class Outputs:
    """Tracks files a command creates so they can be removed if it fails."""

    def __init__(self, out_dir=None):
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.created = []

    def path(self, name):
        p = self.out_dir / name
        p.parent.mkdir(parents=True, exist_ok=True)
        if not p.exists():
            self.created.append(p)
        return p

    def file(self, path):
        p = Path(path)
        p.parent.mkdir(parents=True, exist_ok=True)
        if not p.exists():
            self.created.append(p)
        return p

    def cleanup(self):
        for p in reversed(self.created):
            try:
                p.unlink()
            except FileNotFoundError:
                pass
            except IsADirectoryError:
                pass


def _load_config(path):
    if path is None:
        return {}
    with open(path, encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(doc, dict):
        raise SchemaError(f"{path}: config must be a JSON object")
    unknown = set(doc) - {"synth", "model", "train", "split", "ablate"}
    if unknown:
        raise SchemaError(f"{path}: unknown config sections {sorted(unknown)}")
    return doc


def _model_config(doc, n_views, d_in):
    return encoder.EncoderConfig(**{"d_in": d_in, **doc.get("model", {}), "n_views": n_views})


def _train_config(doc, seed, steps=None):
    section = dict(doc.get("train", {}))
    section["seed"] = seed
    if steps is not None:
        section["steps"] = steps
    return trainer.TrainConfig.from_dict(section)


def _dataset(args):
    manifest = synthdata.load_manifest(args.manifest)
    trainer.apply_split(manifest, trainer.load_split(args.split))
    return manifest


# --- subcommands -------------------------------------------------------------

def cmd_gen(args, out):
    doc = _load_config(args.config)
    cfg = synthdata.SynthConfig.from_dict({**doc.get("synth", {}), "seed": args.seed})
    out_dir = Path(args.out)
    out.path("manifest.json")
    out.path("parts.mceb")
    for i in range(cfg.n_materials):
        out.path(f"materials/mat{i:04d}.mceb")
    manifest = synthdata.generate(cfg, out_dir)
    log.info("wrote %d materials and %d parts to %s", len(manifest.material_ids), len(manifest.parts), out_dir)


def cmd_descriptors(args, out):
    images = sorted(Path(args.images).glob("*.ppm"))
    if not images:
        raise FileNotFoundError(f"no .ppm images in {args.images}")
    names, rows = [], []
    for img_path in images:
        mask_path = Path(args.masks) / (img_path.stem + ".pgm")
        image = imageio.read_ppm(img_path)
        mask = imageio.read_pgm_mask(mask_path)
        if args.crop:
            rect = maskcrop.largest_inscribed_rectangle(mask)
            image, mask = maskcrop.crop(image, rect), maskcrop.crop(mask, rect)
        rows.append(descriptor.color_histogram(image, mask))
        names.append(img_path.stem)
    synthdata.write_matrix(out.path("histograms.mceb"), np.stack(rows))
    with open(out.path("histograms.json"), "w", encoding="utf-8") as fh:
        json.dump({"names": names, "bins": descriptor.N_COLOR_BINS}, fh, indent=1)
        fh.write("\n")


def cmd_crop(args, out):
    image = imageio.read_ppm(args.image)
    mask = imageio.read_pgm_mask(args.mask)
    if image.shape[:2] != mask.shape:
        raise MatEmbedError(f"image {image.shape[1]}x{image.shape[0]} and mask {mask.shape[1]}x{mask.shape[0]} differ")
    rect = maskcrop.largest_inscribed_rectangle(mask)
    imageio.write_ppm(out.file(args.out), maskcrop.crop(image, rect))
    print(f"{rect.x} {rect.y} {rect.w} {rect.h}")


def cmd_split(args, out):
    doc = _load_config(args.config)
    fraction = args.test_fraction if args.test_fraction is not None else doc.get("split", {}).get("test_fraction", 0.25)
    manifest = synthdata.load_manifest(args.manifest)
    assignment = trainer.split_by_object(manifest, fraction, args.seed)
    trainer.save_split(assignment, out.path("split.json"))


def cmd_train(args, out):
    doc = _load_config(args.config)
    manifest = _dataset(args)
    tcfg = _train_config(doc, args.seed, args.steps)
    mcfg = _model_config(doc, manifest.n_views, manifest.config.d_in)
    if args.resume:
        state = trainer.load_checkpoint(args.resume, tcfg)
        init = None
    else:
        state = None
        init = encoder.init_params(mcfg, args.seed)
    history = []
    every = args.checkpoint_every
    while True:
        stop = None
        if every:
            current = state.step if state is not None else 0
            stop = (current // every + 1) * every
        state, hist = trainer.train(tcfg, manifest, init, mcfg.n_heads, state=state, stop_at=stop)
        history += hist
        if every and state.step < tcfg.steps:
            trainer.save_checkpoint(state, out.path(f"checkpoint_step{state.step:06d}.mcpt"))
            continue
        break
    trainer.save_checkpoint(state, out.path("checkpoint.mcpt"))
    trainer.write_history(history, out.path("history.csv"))


def cmd_eval(args, out):
    manifest = _dataset(args)
    methods = [args.mode] if args.mode else (["matclip"] if args.checkpoint else []) + ["v1", "v2"]
    params = n_heads = None
    if "matclip" in methods:
        if not args.checkpoint:
            raise MatEmbedError("--mode matclip needs --checkpoint")
        params, n_heads = trainer.load_params(args.checkpoint)
    rows = []
    for method in methods:
        for condition in retrieval.available_conditions(manifest):
            rows.append(retrieval.evaluate(method, manifest, condition=condition, params=params, n_heads=n_heads))
    retrieval.write_metrics_csv(rows, out.path("metrics.csv"))
    with open(out.path("metrics.md"), "w", encoding="utf-8") as fh:
        fh.write(retrieval.metrics_markdown(rows))
    if args.k:
        _write_rankings(args, manifest, methods, params, n_heads, out)


def _write_rankings(args, manifest, methods, params, n_heads, out):
    parts = [p for p in manifest.parts if p.split == trainer.TEST and p.condition == "main"]
    descriptors = manifest.descriptors[[p.descriptor_row for p in parts]]
    with open(out.path("rankings.csv"), "w", encoding="utf-8") as fh:
        fh.write("method,sample_id,truth," + ",".join(f"rank{i + 1}" for i in range(args.k)) + "\n")
        for method in methods:
            if method == "matclip":
                index = retrieval.build_index(zip(
                    manifest.material_ids, retrieval.material_embeddings(params, n_heads, manifest.views)))
                ranked = retrieval.rank_many(index, encoder.encode_parts(params, descriptors).astype(np.float64), args.k)
                ranked = [[mid for mid, _ in r] for r in ranked]
            else:
                scores = retrieval.baseline_scores(descriptors, manifest.views, method)
                index = retrieval.MaterialIndex(manifest.material_ids, np.zeros((len(manifest.material_ids), 1)))
                ranked = retrieval._ranked_ids(scores, index.ids, index._id_rank, args.k)
            for p, r in zip(parts, ranked):
                fh.write(",".join([method, p.sample_id, p.truth_material_id] + r) + "\n")


def _parse_subsets(text, n_shapes, n_env):
    if not text:
        return [(1, 1), (1, n_env), (n_shapes, 1), (n_shapes, n_env)]
    subsets = []
    for item in text.split(","):
        try:
            s, e = item.lower().split("x")
            subsets.append((int(s), int(e)))
        except ValueError:
            raise MatEmbedError(f"bad subset {item!r}; expected SHAPESxENVS, e.g. 1x3") from None
    return subsets


def cmd_ablate(args, out):
    doc = _load_config(args.config)
    manifest = _dataset(args)
    cfg = manifest.config
    tcfg = _train_config(doc, args.seed, args.steps)
    mcfg = _model_config(doc, manifest.n_views, cfg.d_in)
    subsets = _parse_subsets(args.subsets or doc.get("ablate", {}).get("subsets"), cfg.n_shapes, cfg.n_env)
    rows = retrieval.ablate(mcfg, tcfg, manifest, subsets)
    with open(out.path("ablation.csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["label", "shapes", "envs", "top1"])
        for (label, top1), (s, e) in zip(rows, subsets):
            w.writerow([label, s, e, f"{top1:.2f}"])
    with open(out.path("ablation.md"), "w", encoding="utf-8") as fh:
        fh.write(retrieval.ablation_markdown(rows))


def cmd_subspace(args, out):
    if args.action == "build":
        points = synthdata.read_matrix(args.points)
        ids = _read_ids(args.ids, len(points))
        tree = subspace.KdTree(ids, points)
        for p in ("subspace.mceb", "subspace_ids.json"):
            out.path(p)
        subspace.save_tree(tree, args.out)
    elif args.action == "query":
        if args.radius is None:
            raise MatEmbedError("subspace query needs --radius")
        tree = subspace.load_tree(args.tree)
        queries = synthdata.read_matrix(args.queries)
        with open(out.path("query.csv"), "w", encoding="utf-8") as fh:
            fh.write("row,nearest_id,distance,contains\n")
            for i, q in enumerate(queries):
                nid, dist = tree.nearest(q)
                fh.write(f"{i},{nid},{dist!r},{int(dist <= args.radius)}\n")
    else:
        if args.radius is None:
            raise MatEmbedError("subspace thin needs --radius")
        points = synthdata.read_matrix(args.points)
        ids = _read_ids(args.ids, len(points))
        kept = subspace.thin(points, args.radius)
        synthdata.write_matrix(out.path("thinned.mceb"), points[kept])
        with open(out.path("thinned_ids.json"), "w", encoding="utf-8") as fh:
            json.dump({"ids": [ids[i] for i in kept], "rows": kept}, fh, indent=1)
            fh.write("\n")


def _read_ids(path, n):
    if path is None:
        return [str(i) for i in range(n)]
    with open(path, encoding="utf-8") as fh:
        ids = json.load(fh)["ids"]
    if len(ids) != n:
        raise SchemaError(f"{path}: {len(ids)} ids for {n} points")
    return ids


def cmd_report(args, out):
    rows = []
    for path in args.inputs:
        rows += retrieval.read_metrics_csv(path)
    with open(out.path("report.md"), "w", encoding="utf-8") as fh:
        fh.write(retrieval.metrics_markdown(rows))


# --- parser ------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(prog="matembed", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text, func):
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.set_defaults(func=func)
        return p

    p = add("gen", "generate a synthetic dataset", cmd_gen)
    p.add_argument("--config")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)

    p = add("descriptors", "color histograms for every image/mask pair in two directories", cmd_descriptors)
    p.add_argument("--images", required=True, help="directory of P6 .ppm images")
    p.add_argument("--masks", required=True, help="directory of P5 .pgm masks with matching stems")
    p.add_argument("--crop", action="store_true", help="crop to the largest inscribed rectangle first")
    p.add_argument("--out", required=True)

    p = add("crop", "crop an image to the largest rectangle inside a mask", cmd_crop)
    p.add_argument("--mask", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True, help="output .ppm path")

    p = add("split", "object-level train/test split", cmd_split)
    p.add_argument("--manifest", required=True)
    p.add_argument("--test-fraction", type=float)
    p.add_argument("--config")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)

    p = add("train", "train the material and part encoders", cmd_train)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", required=True)
    p.add_argument("--config")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--checkpoint-every", type=int, default=0)
    p.add_argument("--out", required=True)

    p = add("eval", "Top-1/Top-5 retrieval metrics on the test split", cmd_eval)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--mode", choices=["v1", "v2", "matclip"])
    p.add_argument("--k", type=int, default=0, help="also write the top-k ranking of every test part")
    p.add_argument("--out", required=True)

    p = add("ablate", "retrain on view-grid subsets and report Top-1", cmd_ablate)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", required=True)
    p.add_argument("--config")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--subsets", help="comma list of SHAPESxENVS, e.g. 1x1,2x3")
    p.add_argument("--out", required=True)

    p = add("subspace", "KD-tree subspace membership", cmd_subspace)
    p.add_argument("action", choices=["build", "query", "thin"])
    p.add_argument("--points", help="MCEB point matrix (build, thin)")
    p.add_argument("--ids", help="JSON file with an 'ids' list")
    p.add_argument("--tree", help="directory written by 'subspace build' (query)")
    p.add_argument("--queries", help="MCEB query matrix (query)")
    p.add_argument("--radius", type=float)
    p.add_argument("--out", required=True)

    p = add("report", "merge metrics CSVs into one markdown table", cmd_report)
    p.add_argument("inputs", nargs="+")
    p.add_argument("--out", required=True)
    return parser


_REQUIRED = {
    ("subspace", "build"): ["points"],
    ("subspace", "query"): ["tree", "queries"],
    ("subspace", "thin"): ["points"],
}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    for flag in _REQUIRED.get((args.command, getattr(args, "action", None)), []):
        if getattr(args, flag) is None:
            parser.error(f"subspace {args.action} requires --{flag}")
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    out = Outputs(None if args.command == "crop" else args.out)
    try:
        args.func(args, out)
    except (MatEmbedError, OSError, ValueError, KeyError) as exc:
        out.cleanup()
        msg = str(exc).replace("\n", " ") or type(exc).__name__
        print(f"matembed {args.command}: error: {msg}", file=sys.stderr)
        return 1
    except BaseException:
        out.cleanup()
        raise
    return 0


if __name__ == "__main__":
    sys.exit(main())
