"""Command-line entry point.

Output tree under the configured ``output_dir``::

    data/train.bin, data/test.bin     CIFAR-10 binary batches
    models/<name>.atlz                trained checkpoints
    aes/<white>__<attack>.atae        cached adversarial examples
    reports/*.csv|*.svg|*.png         tables, sweep plots, feature grids

Exit codes: 0 success, 1 configuration or checkpoint error, 2 missing
prerequisite, 3 numeric failure. Failures print one JSON object on stderr.
"""

import argparse
import json
import logging
import sys
import zlib
from pathlib import Path

import numpy as np

from . import bench, checkpoint, report
from .attack import craft
from .config import SEED_ENV, load_config
from .datasets import load_cifar10_bin, make_synthetic_shapes, save_cifar10_bin
from .exceptions import (
    CheckpointError,
    ConfigError,
    DatasetFormatError,
    MissingPrerequisiteError,
    NumericError,
)
from .graph import predict_logits
from .xform import TransformSpec, rotate
from .zoo import build_model, train

log = logging.getLogger("xpose")

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_NUMERIC = 0, 1, 2, 3


class Workspace:
    """Resolves artifact paths and loads prerequisites for one run config."""

    def __init__(self, cfg):
        self.cfg = cfg
        self.root = Path(cfg.output_dir)

    # paths
    def data_path(self, split):
        return self.root / "data" / f"{split}.bin"

    def model_path(self, name):
        return self.root / "models" / f"{name}.atlz"

    def ae_path(self, tag, attack):
        return self.root / "aes" / f"{tag}__{attack}.atae"

    def report_path(self, name):
        return self.root / "reports" / name

    @property
    def input_spec(self):
        return (32, 32, 3, self.cfg.dataset["classes"])

    # loaders
    def _require(self, path, hint):
        if not path.exists():
            raise MissingPrerequisiteError(path, hint)
        return path

    def load_split(self, split):
        X, y = load_cifar10_bin(self._require(self.data_path(split), "run gen-data first"))
        if y.size and y.max() >= self.cfg.dataset["classes"]:
            raise DatasetFormatError(f"{self.data_path(split)}: label {y.max()} exceeds the configured classes")
        return X, y

    def eval_set(self):
        X, y = self.load_split("test")
        n = min(self.cfg.eval_images, len(X))
        return X[:n], y[:n]

    def load_model(self, name):
        spec = self.cfg.model(name)
        path = self._require(self.model_path(name), f"run train --model {name} first")
        expected = build_model(spec.arch, self.input_spec, name=name)
        model, _ = checkpoint.load(path, expected=expected)
        return model

    def load_ae(self, tag, attack):
        path = self._require(self.ae_path(tag, attack), f"run attack for {tag} / {attack} first")
        x, labels, _ = checkpoint.load_adversarial(path)
        return x, labels

    def black_boxes(self, white, explicit=None):
        names = explicit or [n for n in self.cfg.model_names if n not in white]
        overlap = set(names) & set(white)
        if overlap or not names:
            raise ConfigError(f"black boxes {names} must be non-empty and exclude {white}", "")
        return names


def _tag(white):
    return "+".join(white)


def _job_id(tag, attack):
    return zlib.crc32(f"{tag}/{attack}".encode("utf-8"))


def _fname(spec):
    return str(spec).replace(":", "")


def _write(path, data):
    checkpoint.atomic_write(path, data)
    log.info("wrote %s", path)


# ---- steps -----------------------------------------------------------------


def gen_data(ws):
    d = ws.cfg.dataset
    if d["kind"] == "synthetic":
        ds = make_synthetic_shapes(d["n_train"], d["n_test"], seed=d["seed"], size=d["size"], classes=d["classes"])
        train_xy, test_xy = (ds.X_train, ds.y_train), (ds.X_test, ds.y_test)
    else:
        src = Path(d["path"])
        if not src.is_dir():
            raise MissingPrerequisiteError(src, "directory with data_batch_*.bin and test_batch.bin")
        batches = sorted(src.glob("data_batch_*.bin"))
        test = src / "test_batch.bin"
        if not batches or not test.exists():
            raise MissingPrerequisiteError(test if batches else src / "data_batch_1.bin", "CIFAR-10 binary batches")
        parts = [load_cifar10_bin(p) for p in batches]
        train_xy = (np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts]))
        test_xy = load_cifar10_bin(test)
    save_cifar10_bin(ws.data_path("train"), *train_xy)
    save_cifar10_bin(ws.data_path("test"), *test_xy)
    log.info("dataset: %d train, %d test", len(train_xy[1]), len(test_xy[1]))


def train_models(ws, names=None):
    X, y = ws.load_split("train")
    Xt, yt = ws.load_split("test")
    for name in names or ws.cfg.model_names:
        spec = ws.cfg.model(name)
        model = build_model(spec.arch, ws.input_spec, seed=spec.train.seed, name=name)
        _, metrics = train(model, X, y, spec.train, Xt, yt)
        log.info("%s: test accuracy %.4f", name, metrics["test_accuracy"])
        checkpoint.save(
            model,
            ws.model_path(name),
            train=spec.train.to_dict(),
            test_accuracy=metrics["test_accuracy"],
            train_accuracy=metrics["train_accuracy"],
            loss=metrics["loss"],
        )


def attack_models(ws, white, attacks=None):
    members = [ws.load_model(n) for n in white]
    X, y = ws.eval_set()
    tag = _tag(white)
    for name in attacks or list(ws.cfg.attacks):
        cfg = ws.cfg.attacks[name]
        job = _job_id(tag, name)
        x_adv = craft(members, X, y, cfg, job_id=job)
        white_rate = [bench.success_rate(m, x_adv, y) for m in members]
        log.info("%s on %s: white-box success %s", name, tag, white_rate)
        checkpoint.save_adversarial(
            ws.ae_path(tag, name), x_adv, y,
            attack=name, config=cfg.to_dict(), white_box=white, job_id=job, white_box_success=white_rate,
        )  # fmt: skip


def eval_clean(ws, spec):
    X, y = ws.eval_set()
    models = [ws.load_model(n) for n in ws.cfg.model_names]
    rep = bench.clean_transform_protocol(models, X, y, spec, dataset=_dataset_id(ws), seed=ws.cfg.seed)
    _write(ws.report_path(f"clean__{_fname(spec)}.csv"), report.emit_csv([rep]))
    return rep


def _dataset_id(ws):
    d = ws.cfg.dataset
    return f"{d['kind']}-s{d['seed']}" if d["kind"] == "synthetic" else f"cifar10-bin:{Path(d['path']).name}"


def _transfer_reports(ws, white, blacks, attacks, specs):
    X, y = ws.eval_set()
    members = [ws.load_model(n) for n in white]
    black_models = [ws.load_model(n) for n in blacks]
    tag = _tag(white)
    reports = []
    for name in attacks:
        x_adv, labels = ws.load_ae(tag, name)
        if not np.array_equal(labels, y):
            raise CheckpointError(f"{ws.ae_path(tag, name)} was crafted on a different evaluation set")
        for spec in specs:
            reports.append(
                bench.ensemble_protocol(
                    members, black_models, X, y, ws.cfg.attacks[name], spec,
                    x_adv=x_adv, dataset=_dataset_id(ws), attack_name=name,
                )  # fmt: skip
            )
    return reports


def eval_transfer(ws, white, spec, attacks=None, blacks=None):
    blacks = ws.black_boxes(white, blacks)
    reports = _transfer_reports(ws, white, blacks, attacks or list(ws.cfg.attacks), [spec])
    _write(ws.report_path(f"transfer__{_tag(white)}__{_fname(spec)}.csv"), report.emit_csv(reports))
    return reports


def eval_rotate1(ws, white, angles, attacks=None, blacks=None):
    blacks = ws.black_boxes(white, blacks)
    specs = [TransformSpec.rotation(a) for a in angles]
    reports = _transfer_reports(ws, white, blacks, attacks or list(ws.cfg.attacks), specs)
    _write(ws.report_path(f"rotate1__{_tag(white)}.csv"), report.emit_csv(reports))
    return reports


def sweep(ws, white, attack, stride, blacks=None):
    blacks = ws.black_boxes(white, blacks)
    X, y = ws.eval_set()
    x_adv, _ = ws.load_ae(_tag(white), attack)
    members = [ws.load_model(n) for n in white]
    curves = bench.rotation_sweep(
        members, [ws.load_model(n) for n in blacks], X, y, ws.cfg.attacks[attack], stride_deg=stride, x_adv=x_adv
    )
    stem = f"sweep__{_tag(white)}__{attack}"
    _write(ws.report_path(stem + ".csv"), report.emit_sweep_csv(curves))
    _write(ws.report_path(stem + ".svg"), report.emit_svg(curves, title=f"{attack} crafted on {_tag(white)}"))
    return curves


def featdiff(ws, white, attack, black, layer, k, angles=(1.0, -1.0)):
    model = ws.load_model(black)
    _, y = ws.eval_set()
    x_adv, _ = ws.load_ae(_tag(white), attack)
    found = bench.select_feature_pair(model, x_adv, y, angles)
    qualified = found is not None
    if found is None:
        # no AE flips under a small rotation; fall back to the first one
        # the black box still resists so the grid is still produced
        log.warning("no AE in the cache flips %s under rotations %s", black, angles)
        preds = predict_logits(model, x_adv).argmax(axis=1)
        hold = np.flatnonzero(preds == y)
        i = int(hold[0]) if hold.size else 0
        found = (i, float(angles[0]), x_adv[i], rotate(x_adv[i : i + 1], angles[0])[0])
    index, angle, x_fail, x_success = found
    rep = bench.feature_diff(model, x_fail, x_success, layer, k)
    stem = f"featdiff__{_tag(white)}__{attack}__{black}__{layer}"
    _write(ws.report_path(stem + ".png"), report.emit_grid(rep))
    lines = ["image_index,angle_deg,qualified,rank,channel,mean_abs_diff"]
    for rank, ch in enumerate(rep.indices):
        lines.append(f"{index},{angle!r},{int(qualified)},{rank},{int(ch)},{float(rep.scores[ch])!r}")
    _write(ws.report_path(stem + ".csv"), "\n".join(lines) + "\n")
    return rep


def collect(ws, out):
    """Copy every report into ``out`` and add a ratio summary."""
    src = ws.root / "reports"
    if not src.is_dir():
        raise MissingPrerequisiteError(src, "run eval, sweep or featdiff first")
    out = Path(out)
    lines = ["file,transform,cells,skipped,max_ratio,mean_ratio"]
    for path in sorted(src.iterdir()):
        if path.name.startswith("."):
            continue
        _write(out / path.name, path.read_bytes())
        if path.suffix == ".csv" and path.name.split("__")[0] in ("clean", "transfer", "rotate1"):
            reports = report.parse_csv(path.read_text())
            for transform in sorted({r.transform for r in reports}):
                mx, mean, n, skipped = bench.ratio_statistics([r for r in reports if r.transform == transform])
                lines.append(f"{path.name},{transform},{n},{skipped},{mx!r},{mean!r}")
    _write(out / "summary.csv", "\n".join(lines) + "\n")


def run_all(ws):
    """gen-data, train, then every configured protocol in order."""
    cfg = ws.cfg
    gen_data(ws)
    train_models(ws)
    crafted = set()

    def ensure(white, attacks):
        todo = [a for a in attacks if (_tag(white), a) not in crafted]
        if todo:
            attack_models(ws, white, todo)
            crafted.update((_tag(white), a) for a in todo)

    for proto in cfg.protocols:
        kind = proto["kind"]
        if kind == "clean":
            eval_clean(ws, TransformSpec.parse(proto["transform"]))
            continue
        white = proto.get("members") or [proto["whitebox"]]
        attacks = proto.get("attacks") or ([proto["attack"]] if "attack" in proto else list(cfg.attacks))
        ensure(white, attacks)
        if kind in ("single", "ensemble"):
            eval_transfer(ws, white, TransformSpec.parse(proto["transform"]), attacks, proto.get("blackboxes"))
        elif kind == "rotate1":
            eval_rotate1(ws, white, proto["angles"], attacks, proto.get("blackboxes"))
        elif kind == "sweep":
            sweep(ws, white, proto["attack"], proto["stride"], proto.get("blackboxes"))
        elif kind == "featdiff":
            featdiff(ws, white, proto["attack"], proto["blackbox"], proto["layer"], proto["k"])


# ---- argument parsing --------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message, "")


def _names(text):
    return [t for t in text.split(",") if t]


def _white_group(p, required=True):
    g = p.add_mutually_exclusive_group(required=required)
    g.add_argument("--whitebox", metavar="NAME", help="craft on a single zoo model")
    g.add_argument("--ensemble", metavar="A,B,...", type=_names, help="craft on the mean-logit ensemble")
    return g


def build_parser():
    p = _Parser(prog="xpose", description="Transpose and rotation transferability experiments.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def cmd(name, help_):
        s = sub.add_parser(name, help=help_)
        s.add_argument("--config", required=True, metavar="C", help=f"run config JSON ({SEED_ENV} overrides its seed)")
        return s

    cmd("gen-data", "write the train/test CIFAR-10 binary batches")
    s = cmd("train", "train zoo models")
    s.add_argument("--model", metavar="NAME", help="train only this model (default: all)")
    s = cmd("attack", "craft and cache adversarial examples")
    _white_group(s)
    s.add_argument("--attack", metavar="A,B", type=_names, help="attacks to run (default: all)")
    s = cmd("eval", "evaluate clean or cached AEs with and without a transform")
    g = _white_group(s, required=False)
    g.add_argument("--clean", action="store_true", help="clean images, every zoo model")
    s.add_argument(
        "--transform", default="transpose",
        help="identity, transpose, fliplr or rotate:<deg>; positive angles rotate counter-clockwise",
    )  # fmt: skip
    s.add_argument("--attack", metavar="A,B", type=_names)
    s.add_argument("--blackboxes", metavar="A,B", type=_names)
    s = cmd("sweep", "success rate over counter-clockwise rotations")
    _white_group(s)
    s.add_argument("--attack", required=True)
    s.add_argument("--stride", type=int, default=10, help="degrees, must divide 360")
    s.add_argument("--blackboxes", metavar="A,B", type=_names)
    s = cmd("featdiff", "top-k channel activation differences under a 1 degree rotation")
    _white_group(s)
    s.add_argument("--attack", required=True)
    s.add_argument("--blackbox", required=True)
    s.add_argument("--layer", required=True)
    s.add_argument("--k", type=int, default=16)
    s = cmd("report", "collect reports and ratio statistics into a directory")
    s.add_argument("--out", required=True, metavar="DIR")
    cmd("run", "run gen-data, train and every configured protocol")
    return p


def _dispatch(args):
    cfg = load_config(args.config)
    ws = Workspace(cfg)
    white = getattr(args, "ensemble", None) or ([args.whitebox] if getattr(args, "whitebox", None) else None)
    for name in (white or []) + (getattr(args, "blackboxes", None) or []):
        if name not in cfg.model_names:
            raise ConfigError(f"unknown model {name!r}", "")
    attack = getattr(args, "attack", None)
    for name in ([attack] if isinstance(attack, str) else attack or []):
        if name not in cfg.attacks:
            raise ConfigError(f"unknown attack {name!r}", "")
    if args.command == "gen-data":
        gen_data(ws)
    elif args.command == "train":
        if args.model and args.model not in cfg.model_names:
            raise ConfigError(f"unknown model {args.model!r}", "")
        train_models(ws, [args.model] if args.model else None)
    elif args.command == "attack":
        attack_models(ws, white, args.attack)
    elif args.command == "eval":
        try:
            spec = TransformSpec.parse(args.transform)
        except ValueError as exc:
            raise ConfigError(str(exc), "") from None
        if args.clean or not white:
            eval_clean(ws, spec)
        else:
            eval_transfer(ws, white, spec, args.attack, args.blackboxes)
    elif args.command == "sweep":
        if args.stride <= 0 or 360 % args.stride:
            raise ConfigError(f"stride {args.stride} must be a positive divisor of 360", "")
        sweep(ws, white, args.attack, args.stride, args.blackboxes)
    elif args.command == "featdiff":
        if args.blackbox not in cfg.model_names:
            raise ConfigError(f"unknown model {args.blackbox!r}", "")
        if args.k < 1:
            raise ConfigError("--k must be positive", "")
        featdiff(ws, white, args.attack, args.blackbox, args.layer, args.k)
    elif args.command == "report":
        collect(ws, args.out)
    elif args.command == "run":
        run_all(ws)


def _fail(code, kind, exc, **extra):
    payload = {"error": kind, "exit_code": code, "message": str(exc), **extra}
    print(json.dumps(payload, sort_keys=True), file=sys.stderr)
    return code


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, "usage", exc)
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        _dispatch(args)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, "config", exc, pointer=exc.pointer)
    except MissingPrerequisiteError as exc:
        return _fail(EXIT_MISSING, "missing_prerequisite", exc, path=exc.path)
    except NumericError as exc:
        return _fail(EXIT_NUMERIC, "numeric", exc)
    except (CheckpointError, DatasetFormatError) as exc:
        return _fail(EXIT_CONFIG, type(exc).__name__, exc)
    except KeyError as exc:
        # unknown tap layer and similar lookups
        return _fail(EXIT_CONFIG, "config", exc)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
