"""Command-line entry point: ``mcinet <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import data, figures, gradcheck, graph, train as T, zoo
from .graph import GraphError, WeightFileError
from .tensor import ShapeError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
GRAD_TOL = 1e-4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _add_train_flags(p):
    p.add_argument("--config", help="JSON file mirroring TrainConfig fields")
    p.add_argument("--lr", "--learning-rate", dest="learning_rate", type=float)
    p.add_argument("--momentum", type=float)
    p.add_argument("--weight-decay", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--freeze", dest="freeze_boundary",
                   help="node id to freeze through, 'features' (default) or 'none'")
    p.add_argument("--seed", type=int, help="set every seed at once")
    for s in ("split", "shuffle", "init", "dropout"):
        p.add_argument(f"--{s}-seed", type=int)
    p.add_argument("--fraction", type=float, default=0.7, help="train fraction of subjects")


def _add_model_flags(p, multi=False):
    if multi:
        p.add_argument("--archs", default=",".join(zoo.ARCHITECTURES),
                       help="comma-separated architectures")
    else:
        p.add_argument("--arch", required=True, choices=zoo.ARCHITECTURES)
    p.add_argument("--input-size", type=int, help="square input extent (default: native)")
    p.add_argument("--width", type=float, default=1.0, help="channel multiplier")
    p.add_argument("--hidden", type=int, help="fc hidden units for alexnet/vgg16")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mcinet", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="write a synthetic slice corpus and manifest")
    s.add_argument("--out", required=True)
    s.add_argument("--per-class", type=int, default=210)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--size", type=int, default=64)

    s = sub.add_parser("split", help="subject-level train/test split of a manifest")
    s.add_argument("--manifest", required=True)
    s.add_argument("--fraction", type=float, default=0.7)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)

    s = sub.add_parser("train", help="transfer-train one architecture")
    s.add_argument("--manifest", help="full manifest; split with --split-seed/--fraction")
    s.add_argument("--train-manifest")
    s.add_argument("--test-manifest")
    s.add_argument("--pretrained", help="NWTS file for the backbone (source-class head)")
    s.add_argument("--out", required=True)
    s.add_argument("--timings", action="store_true", help="include wall-clock times in outputs")
    _add_model_flags(s)
    _add_train_flags(s)

    s = sub.add_parser("eval", help="evaluate a trained model directory")
    s.add_argument("--model", required=True, help="directory written by 'train'")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out")

    s = sub.add_parser("compare", help="train and compare several architectures")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--pretrained", action="append", default=[], metavar="ARCH=PATH")
    s.add_argument("--timings", action="store_true")
    _add_model_flags(s, multi=True)
    _add_train_flags(s)

    s = sub.add_parser("predict", help="classify a single slice image")
    s.add_argument("--model", required=True)
    s.add_argument("--image", required=True, nargs="+")

    s = sub.add_parser("inspect", help="print the census and per-node shapes of an architecture")
    s.add_argument("--arch", required=True, choices=zoo.ARCHITECTURES)
    s.add_argument("--classes", type=int, default=1000)
    s.add_argument("--input-size", type=int)
    s.add_argument("--width", type=float, default=1.0)
    s.add_argument("--json", action="store_true", help="full JSON summary")

    s = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--all", action="store_true")
    g.add_argument("--layer", choices=gradcheck.LAYER_KINDS + ("graph",))
    s.add_argument("--instances", type=int, default=20)
    s.add_argument("--seed", type=int, default=0)
    return p


def _effective_config(args) -> T.TrainConfig:
    cfg = T.TrainConfig().to_dict()
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise data.DataError(f"config file not found: {path}")
        loaded = json.loads(path.read_text())
        seeds = loaded.pop("seeds", {})
        cfg.update(loaded)
        cfg["seeds"].update(seeds)
    for key in ("learning_rate", "momentum", "weight_decay", "epochs", "batch_size", "freeze_boundary"):
        v = getattr(args, key)
        if v is not None:
            cfg[key] = v
    if cfg["freeze_boundary"] in ("none", ""):
        cfg["freeze_boundary"] = None
    if args.seed is not None:
        cfg["seeds"] = {k: args.seed for k in cfg["seeds"]}
    for k in ("split", "shuffle", "init", "dropout"):
        v = getattr(args, f"{k}_seed")
        if v is not None:
            cfg["seeds"][k] = v
    try:
        return T.TrainConfig.from_dict(cfg)
    except (TypeError, ValueError) as e:
        raise UsageError(f"invalid configuration: {e}") from None


def _announce(config: dict):
    print("effective config: " + json.dumps(config, sort_keys=True), file=sys.stderr)


def _write(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")
    print(f"wrote {path}")


def _split_from_args(args, cfg) -> data.SplitResult:
    if args.manifest:
        m = data.load_manifest(args.manifest)
        return data.subject_split(m, args.fraction, cfg.seeds.split)
    if not args.train_manifest:
        raise UsageError("train: give --manifest or --train-manifest")
    tr = data.load_manifest(args.train_manifest)
    te = data.load_manifest(args.test_manifest) if args.test_manifest else data.DatasetManifest()
    return data.SplitResult(tr, te, cfg.seeds.split, args.fraction)


def _load_model(model_dir):
    model_dir = Path(model_dir)
    meta_path = model_dir / "model.json"
    if not meta_path.is_file():
        raise data.DataError(f"model metadata not found: {meta_path}")
    meta = json.loads(meta_path.read_text())
    spec = T.ModelSpec(**meta["model"])
    g = spec.build(0)
    graph.replace_head(g, meta["class_count"])
    graph.load_weights(g, model_dir / "weights.nwts")
    return g, data.NormStats.from_dict(meta["norm_stats"]), meta


def cmd_synth(args):
    _announce({"out": args.out, "per_class": args.per_class, "seed": args.seed, "size": args.size})
    m = data.synth_dataset(args.per_class, args.seed, args.out, size=args.size)
    print(f"wrote {Path(args.out) / 'manifest.csv'}: {len(m)} records, subjects {m.class_summary()}")


def cmd_split(args):
    _announce({"manifest": args.manifest, "fraction": args.fraction, "seed": args.seed})
    m = data.load_manifest(args.manifest)
    s = data.subject_split(m, args.fraction, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    data.write_manifest(s.train, out / "train.csv")
    data.write_manifest(s.test, out / "test.csv")
    info = {"seed": s.seed, "fraction": s.fraction, "fingerprint": s.fingerprint(),
            "train_subjects": s.train.class_summary(), "test_subjects": s.test.class_summary()}
    _write(out / "split.json", json.dumps(info, indent=2) + "\n")
    print(f"train {len(s.train.subjects())} subjects / test {len(s.test.subjects())} subjects")


def cmd_train(args):
    cfg = _effective_config(args)
    spec = T.ModelSpec(args.arch, args.input_size, args.width, args.hidden)
    config = {"train": cfg.to_dict(), "model": vars(spec), "fraction": args.fraction}
    _announce(config)
    split = _split_from_args(args, cfg)
    out = Path(args.out)

    def progress(epoch, h):
        print(f"epoch {epoch}: loss {h.loss[-1]:.5f} accuracy {h.accuracy[-1]:.4f}")

    g = T.transfer_model(spec, cfg, args.pretrained)
    size = g.input_shape[1:]
    train_ds = data.prepare(split.train, size)
    g, history = T.train(g, train_ds, cfg, progress=progress)
    out.mkdir(parents=True, exist_ok=True)
    graph.save_weights(g, out / "weights.nwts")
    meta = {"model": vars(spec), "class_count": g.class_count, "norm_stats": train_ds.stats.to_dict(),
            "config": config, "split_fingerprint": split.fingerprint()}
    _write(out / "model.json", json.dumps(meta, indent=2) + "\n")
    _write(out / "history.json", history.to_json(args.timings) + "\n")
    if len(split.test):
        test_ds = data.prepare(split.test, size, train_ds.stats)
        report = T.evaluate(g, test_ds, config)
        _write(out / "eval_report.json", report.to_json() + "\n")
        print(f"subject accuracy {report.subject_accuracy:.4f}, slice accuracy {report.slice_accuracy:.4f}")


def cmd_eval(args):
    _announce({"model": args.model, "manifest": args.manifest})
    g, stats, meta = _load_model(args.model)
    m = data.load_manifest(args.manifest)
    ds = data.prepare(m, g.input_shape[1:], stats)
    report = T.evaluate(g, ds, meta.get("config"))
    out = Path(args.out) if args.out else Path(args.model)
    _write(out / "eval_report.json", report.to_json() + "\n")
    print(f"subject accuracy {report.subject_accuracy:.4f}, slice accuracy {report.slice_accuracy:.4f}")
    print(f"confusion (rows true normal/mci): {report.confusion_matrix}")


def cmd_compare(args):
    cfg = _effective_config(args)
    archs = [a.strip().lower() for a in args.archs.split(",") if a.strip()]
    bad = [a for a in archs if a not in zoo.ARCHITECTURES]
    if bad or not archs:
        raise UsageError(f"unknown architectures: {bad or args.archs}")
    pretrained = {}
    for item in args.pretrained:
        arch, sep, path = item.partition("=")
        if not sep:
            raise UsageError(f"--pretrained expects ARCH=PATH, got {item!r}")
        pretrained[arch] = path
    _announce({"train": cfg.to_dict(), "archs": archs, "input_size": args.input_size,
               "width": args.width, "hidden": args.hidden, "fraction": args.fraction})
    m = data.load_manifest(args.manifest)
    split = data.subject_split(m, args.fraction, cfg.seeds.split)
    report = T.compare(archs, split, cfg, input_size=args.input_size, width=args.width,
                       hidden=args.hidden, pretrained=pretrained)
    out = Path(args.out)
    _write(out / "comparison.json", report.to_json(args.timings) + "\n")
    _write(out / "comparison.csv", report.to_csv(args.timings))
    figures.emit_comparison_figure(report, out / "comparison.svg")
    print(f"wrote {out / 'comparison.svg'}")
    for r in report.rows:
        print(f"{r['architecture']:>10}  subject {r['subject_accuracy'] * 100:6.2f}%  "
              f"slice {r['slice_accuracy'] * 100:6.2f}%  params {r['params']}")


def cmd_predict(args):
    _announce({"model": args.model, "images": args.image})
    g, stats, _ = _load_model(args.model)
    for path in args.image:
        label, prob = T.predict(g, data.decode_image(path), stats)
        print(f"{path}\t{label}\t{prob:.4f}")


def cmd_inspect(args):
    _announce({"arch": args.arch, "classes": args.classes, "input_size": args.input_size,
               "width": args.width})
    g = zoo.build(args.arch, args.classes, input_size=args.input_size, width=args.width)
    if args.json:
        print(graph.summary_json(g))
        return
    c = graph.census(g)
    print(f"architecture {args.arch}: conv={c.conv} fc={c.fc} parameters={c.parameters}")
    print("counts: " + ", ".join(f"{k}={v}" for k, v in sorted(c.counts.items())))
    for note in c.notes:
        print(f"note: {note}")
    for nid, shape in c.shapes:
        print(f"  {nid:<28} {g.nodes[nid].kind:<16} {'x'.join(map(str, shape))}")


def cmd_gradcheck(args):
    _announce({"all": args.all, "layer": args.layer, "instances": args.instances, "seed": args.seed})
    kinds = gradcheck.LAYER_KINDS if args.all else tuple(k for k in (args.layer,) if k != "graph")
    results = gradcheck.layer_suite(args.instances, args.seed, kinds)
    if args.all or args.layer == "graph":
        results["graph"] = gradcheck.toy_graph_check(args.seed)
    failed = False
    for kind, err in results.items():
        ok = err < GRAD_TOL
        failed |= not ok
        print(f"{'PASS' if ok else 'FAIL'}  {kind:<14} max relative error {err:.3e}")
    return EXIT_NUMERIC if failed else EXIT_OK


COMMANDS = {"synth": cmd_synth, "split": cmd_split, "train": cmd_train, "eval": cmd_eval,
            "compare": cmd_compare, "predict": cmd_predict, "inspect": cmd_inspect,
            "gradcheck": cmd_gradcheck}


def run(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:  # --help
        return EXIT_OK if not e.code else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args) or EXIT_OK
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (data.DataError, WeightFileError, FileNotFoundError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except T.NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (GraphError, ShapeError) as e:
        print(f"model error: {e}", file=sys.stderr)
        return EXIT_USAGE


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
