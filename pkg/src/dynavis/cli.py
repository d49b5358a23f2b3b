"""Command-line entry point.

    dynavis <command> [--config FILE] [--set key=value]... [--seed N] [--out DIR]

Commands: gen-data, pretrain, train-cls, train-cd, eval, embed, retrieve,
bench.  Report commands write CSV plus a rendered PNG figure next to it.
Set DYNAVIS_THREADS to cap the numeric libraries' thread pools (it must
be set before heavy imports take effect, so the CLI applies it first
thing).
"""

from __future__ import annotations

import argparse
import os
import sys


def _apply_thread_cap():
    threads = os.environ.get("DYNAVIS_THREADS")
    if threads:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                    "MKL_NUM_THREADS", "NUMBA_NUM_THREADS"):
            os.environ.setdefault(var, threads)


_apply_thread_cap()

import numpy as np

from . import bench as bench_mod
from . import config as config_mod
from . import data as data_mod
from . import io as io_mod
from . import plots, pretrain, tasks
from .rng import SeedStream


def _common(p: argparse.ArgumentParser, out_required: bool = False):
    p.add_argument("--config", default=None, help="config file (key = value lines)")
    p.add_argument("--set", dest="sets", action="append", default=[],
                   metavar="KEY=VALUE", help="override a config key")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, required=out_required,
                   help="output directory")


def _setup(args):
    cfg = config_mod.load(args.config, args.sets)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
    return cfg, SeedStream(args.seed)


def _load_scenes(root: str):
    images, labels, anns = data_mod.read_scene_dataset(root)
    by_path = {p: (b, c) for p, b, c in anns}
    names = [p for p, _ in data_mod.read_labels(os.path.join(root, "labels.txt"))]
    boxes = [by_path.get(n, (np.zeros((0, 4)), np.zeros(0, np.int64)))[0] for n in names]
    cats = [by_path.get(n, (np.zeros((0, 4)), np.zeros(0, np.int64)))[1] for n in names]
    return images, labels, boxes, cats


def cmd_gen_data(args):
    cfg, stream = _setup(args)
    n_cls = cfg["data.num_classes"]
    kw = dict(size=cfg["data.size"], categories=range(n_cls),
              max_targets=cfg["data.max_targets"])
    train = data_mod.make_dataset(stream.child("train"), cfg["data.num_train"], **kw)
    test = data_mod.make_dataset(stream.child("test"), cfg["data.num_test"], **kw)
    data_mod.write_scene_dataset(os.path.join(args.out, "train"), train)
    data_mod.write_scene_dataset(os.path.join(args.out, "test"), test)
    pairs = data_mod.make_change_dataset(stream.child("pairs"), cfg["data.num_pairs"],
                                         size=cfg["data.size"],
                                         categories=range(n_cls))
    data_mod.write_change_dataset(os.path.join(args.out, "pairs"), pairs)
    print(f"wrote {len(train)} train + {len(test)} test scenes and "
          f"{len(pairs)} change pairs under {args.out}")


def cmd_pretrain(args):
    cfg, stream = _setup(args)
    images, _, boxes, cats = _load_scenes(args.data)
    bc = config_mod.backbone_config(cfg)
    model = pretrain.PretrainModel(bc, data_mod.NUM_CATEGORIES,
                                   stream.child("init").generator())
    out = pretrain.pretrain(
        model, images, boxes, cats,
        epochs=cfg["train.epochs"], batch_size=cfg["train.batch_size"],
        seed_stream=stream.child("pretrain"), lr=cfg["train.pretrain_lr"],
        tau=cfg["train.tau"], ce_weight=cfg["train.ce_weight"],
        per_region=cfg["train.per_region"], out_dir=args.out)
    if args.out and out["history"]:
        plots.render_training_curves(out["history"],
                                     os.path.join(args.out, "pretrain_curves.png"),
                                     title="pretraining")
    return 1 if out["aborted"] else 0


def cmd_train_cls(args):
    cfg, stream = _setup(args)
    images, labels, _, _ = _load_scenes(args.data)
    bc = config_mod.backbone_config(cfg)
    model = tasks.Classifier(bc, cfg["data.num_classes"],
                             stream.child("init").generator())
    if args.init:
        state, _, _, _ = io_mod.load_checkpoint(args.init)
        bb_state = {k[len("backbone."):]: v for k, v in state.items()
                    if k.startswith("backbone.")}
        model.backbone.load_state_dict(bb_state)
        print(f"initialized backbone from {args.init}")
    out = tasks.train_classifier(
        model, images, labels, epochs=cfg["train.epochs"],
        batch_size=cfg["train.batch_size"], seed_stream=stream.child("train"),
        lr=cfg["train.lr"], out_dir=args.out)
    if args.out and out["history"]:
        plots.render_training_curves(out["history"],
                                     os.path.join(args.out, "train_curves.png"),
                                     title="classification")
    return 1 if out["aborted"] else 0


def cmd_train_cd(args):
    cfg, stream = _setup(args)
    imgs_a, imgs_b, masks = data_mod.read_change_dataset(args.data)
    bc = config_mod.backbone_config(cfg)
    model = tasks.ChangeDetector(bc, stream.child("init").generator())
    out = tasks.train_change_detector(
        model, imgs_a, imgs_b, masks, epochs=cfg["train.epochs"],
        batch_size=cfg["train.batch_size"], seed_stream=stream.child("train"),
        lr=cfg["train.lr"], out_dir=args.out)
    if args.out and out["history"]:
        plots.render_training_curves(out["history"],
                                     os.path.join(args.out, "cd_curves.png"),
                                     title="change detection")
    return 1 if out["aborted"] else 0


def cmd_eval(args):
    cfg, stream = _setup(args)
    bc = config_mod.backbone_config(cfg)
    state, _, epoch, _ = io_mod.load_checkpoint(args.ckpt)
    if args.task == "cls":
        images, labels, _, _ = _load_scenes(args.data)
        model = tasks.Classifier(bc, cfg["data.num_classes"],
                                 stream.child("init").generator())
        model.load_state_dict({k: v for k, v in state.items()})
        acc = tasks.evaluate_classifier(model, images, labels,
                                        cfg["train.batch_size"])
        print(f"accuracy: {100 * acc:.2f}% ({images.shape[0]} images, "
              f"checkpoint epoch {epoch})")
    else:
        imgs_a, imgs_b, masks = data_mod.read_change_dataset(args.data)
        model = tasks.ChangeDetector(bc, stream.child("init").generator())
        model.load_state_dict({k: v for k, v in state.items()})
        f1, iou = tasks.evaluate_change_detector(model, imgs_a, imgs_b, masks)
        print(f"f1: {100 * f1:.2f}%  iou: {100 * iou:.2f}% "
              f"({imgs_a.shape[0]} pairs, checkpoint epoch {epoch})")
        if args.out:
            import dynavis.tensor as T
            with T.no_tape():
                logits = model(data_mod.to_model_input(imgs_a[:1]),
                               data_mod.to_model_input(imgs_b[:1]))
            prob = 1.0 / (1.0 + np.exp(-logits.data[0, 0]))
            plots.render_change_panel(imgs_a[0], imgs_b[0], masks[0], prob,
                                      os.path.join(args.out, "change_example.png"))


def cmd_embed(args):
    cfg, stream = _setup(args)
    bc = config_mod.backbone_config(cfg)
    images, labels, _, _ = _load_scenes(args.data)
    model = tasks.Embedder(bc, stream.child("init").generator())
    if args.ckpt:
        state, _, _, _ = io_mod.load_checkpoint(args.ckpt)
        bb_state = {k[len("backbone."):]: v for k, v in state.items()
                    if k.startswith("backbone.")}
        model.backbone.load_state_dict(bb_state)
    embs = tasks.embed_images(model, images, cfg["train.batch_size"])
    bits = cfg["retrieve.bits"] or bc.d_embed
    hashes = tasks.trivial_hash(embs, bits)
    ids = [p for p, _ in data_mod.read_labels(os.path.join(args.data, "labels.txt"))]
    path = os.path.join(args.out, "index.dvix")
    io_mod.save_index(path, ids, embs, hashes)
    print(f"wrote {len(ids)} embeddings (d={embs.shape[1]}, {bits}-bit codes) to {path}")


def cmd_retrieve(args):
    cfg, stream = _setup(args)
    ids, embs, hashes = io_mod.load_index(args.index)
    images, labels, _, _ = _load_scenes(args.data)
    label_of = dict(zip(ids, labels))
    k = cfg["retrieve.k"]
    mode = cfg["retrieve.mode"]
    qi = ids.index(args.query) if args.query else 0
    if mode == "hamming":
        order = tasks.retrieve(hashes[qi], hashes, k + 1, mode="hamming")
    else:
        order = tasks.retrieve(embs[qi], embs, k + 1, mode="cosine")
    order = [i for i in order if i != qi][:k]
    rows = [[ids[i], int(label_of[ids[i]] == label_of[ids[qi]])] for i in order]
    if args.out:
        csv_path = os.path.join(args.out, "retrieval.csv")
        io_mod.write_csv(csv_path, ["result_id", "relevant"], rows)
        plots.render_retrieval_panel(
            images[qi], [images[i] for i in order[:8]],
            [bool(r[1]) for r in rows[:8]],
            os.path.join(args.out, "retrieval.png"))
        print(f"wrote {csv_path} and retrieval.png")
    for rid, rel in rows[:10]:
        print(f"{rid}  {'hit' if rel else 'miss'}")


def cmd_bench(args):
    cfg, stream = _setup(args)
    bc = config_mod.backbone_config(cfg)
    records = bench_mod.run_benchmark(
        bc, stream.child("bench").generator(),
        resolutions=tuple(cfg["bench.resolutions"]), repeats=cfg["bench.repeats"])
    ex = bench_mod.scaling_exponents(records)
    for model, d in ex.items():
        print(f"{model}: madds slope {d['madds']:.2f}, "
              f"peak-bytes slope {d['peak_bytes']:.2f}, "
              f"latency slope {d['latency']:.2f}")
    if args.out:
        csv_path = os.path.join(args.out, "bench.csv")
        io_mod.write_csv(csv_path, bench_mod.BENCH_HEADER,
                         [r.row() for r in records])
        plots.render_bench_figure(records, os.path.join(args.out, "bench.png"))
        print(f"wrote {csv_path} and bench.png")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dynavis",
                                description="selective-scan vision backbone tools")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("gen-data", help="write a synthetic dataset")
    _common(sp, out_required=True)
    sp.set_defaults(fn=cmd_gen_data)

    sp = sub.add_parser("pretrain", help="region-contrastive pretraining")
    sp.add_argument("--data", required=True)
    _common(sp)
    sp.set_defaults(fn=cmd_pretrain)

    sp = sub.add_parser("train-cls", help="train the scene classifier")
    sp.add_argument("--data", required=True)
    sp.add_argument("--init", default=None, help="warm-start backbone checkpoint")
    _common(sp)
    sp.set_defaults(fn=cmd_train_cls)

    sp = sub.add_parser("train-cd", help="train the change detector")
    sp.add_argument("--data", required=True)
    _common(sp)
    sp.set_defaults(fn=cmd_train_cd)

    sp = sub.add_parser("eval", help="evaluate a checkpoint")
    sp.add_argument("--data", required=True)
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--task", choices=("cls", "cd"), default="cls")
    _common(sp)
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("embed", help="embed a dataset into a retrieval index")
    sp.add_argument("--data", required=True)
    sp.add_argument("--ckpt", default=None)
    _common(sp, out_required=True)
    sp.set_defaults(fn=cmd_embed)

    sp = sub.add_parser("retrieve", help="query a retrieval index")
    sp.add_argument("--index", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--query", default=None, help="id of the query image")
    _common(sp)
    sp.set_defaults(fn=cmd_retrieve)

    sp = sub.add_parser("bench", help="scaling benchmark vs attention baseline")
    _common(sp)
    sp.set_defaults(fn=cmd_bench)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args) or 0
    except (config_mod.ConfigError, io_mod.FormatError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
