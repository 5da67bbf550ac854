"""Command-line entry point: ``patchdesc {synth,stats,train,eval,describe,match}``.

Options come from flags and an optional JSON config file (``--config``);
flags win.  The resolved configuration and the tool version are written
into every artifact.  Exit codes: 0 success, 2 input or configuration
error, 3 artifact integrity error, 4 numeric abort.
"""
import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, fields

import numpy as np
from PIL import Image

from . import __version__, container
from .data import (
    PATCH, PairDataset, PairList, load_pair_list, load_patch_store, make_synthetic_dataset,
    write_pair_list, write_patch_store,
)
from .errors import (
    DimensionError, IngestionError, IntegrityError, ModelFormatError, NumericAbort, ParseError,
    PatchDescError, RoleError,
)
from .evaluate import evaluate, match_descriptors, score_pairs, top_errors, write_report
from .loss import estimate_margin
from .model import calibrate_batchnorm, describe, init_model, load_model, save_model
from .optim import AdadeltaState, TrainSchedule, load_checkpoint, train, write_loss_trace
from .preprocess import ALL_TAGS, NormStats, Preprocessor, compute_norm_stats, equalize_all, expand_training_set

log = logging.getLogger("patchdesc")

EXIT_INPUT, EXIT_INTEGRITY, EXIT_NUMERIC = 2, 3, 4
CALIBRATION_PATCHES = 2000


class ConfigError(PatchDescError, ValueError):
    pass


@dataclass
class RunConfig:
    """Every knob of a run; unused fields stay at their defaults."""

    arch: str = "cnn7"
    hist_eq: bool = False
    augment: bool = False
    margin: object = "auto"
    margin_pairs: int = 1000
    epochs: int = 40
    batch_size: int = 100
    seed: int = 0
    shuffle_seed: int = 0
    lr: float = 0.01
    stn_lr_scale: float = 0.01
    weight_decay: float = 0.001
    checkpoint_every: int = 0
    dataset: str = None
    pairs: str = None
    stats: str = None
    model: str = None
    resume: str = None
    output: str = None

    def resolved_margin(self):
        if self.margin == "auto":
            return None
        try:
            value = float(self.margin)
        except (TypeError, ValueError):
            raise ConfigError(f"margin must be 'auto' or a positive number, got {self.margin!r}") from None
        if not value > 0:
            raise ConfigError(f"margin must be positive, got {value}")
        return value


CONFIG_FIELDS = {f.name for f in fields(RunConfig)}


def build_config(args):
    """Defaults, then the config file, then explicit flags."""
    values = {}
    if getattr(args, "config", None):
        try:
            with open(args.config) as fh:
                values = json.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file {args.config} does not exist") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {args.config} is not valid JSON: {exc}") from None
        unknown = sorted(set(values) - CONFIG_FIELDS)
        if unknown:
            raise ConfigError(f"unknown config keys in {args.config}: {', '.join(unknown)}")
    for name in CONFIG_FIELDS:
        flag = getattr(args, name, None)
        if flag is not None:
            values[name] = flag
    return RunConfig(**values)


def provenance(cfg):
    return {"version": __version__, "run_config": asdict(cfg)}


def provenance_comments(cfg):
    return [f"patchdesc {__version__}", "run_config " + json.dumps(asdict(cfg), sort_keys=True)]


def _require(cfg, *names):
    missing = [n for n in names if getattr(cfg, n) in (None, "")]
    if missing:
        raise ConfigError("missing required option(s): " + ", ".join("--" + n.replace("_", "-") for n in missing))


def _file_id(path):
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()[:16]


def _stats_id(pre_dict):
    return hashlib.sha256(json.dumps(pre_dict, sort_keys=True).encode()).hexdigest()[:16]


def _preprocessor_of(model):
    pre = model.metadata.get("preprocess")
    if not pre or not pre.get("stats"):
        raise ModelFormatError("model file carries no normalisation statistics")
    return Preprocessor.from_dict(pre)


def _check_patch_size(model):
    if tuple(model.input_shape) != (1, PATCH, PATCH):
        raise DimensionError(f"model expects inputs of shape {tuple(model.input_shape)}, dataset patches are 1x{PATCH}x{PATCH}")


# -- commands -----------------------------------------------------------------

def cmd_synth(cfg, args):
    """Write a synthetic dataset in the on-disk layout plus train/test pair files."""
    _require(cfg, "output")
    geo = tuple(args.geometric_jitter) if args.geometric_jitter else None
    store, tr, te = make_synthetic_dataset(args.points, args.per_point, cfg.seed, train_fraction=args.train_fraction,
                                           pairs_per_point=args.pairs_per_point, contrast_jitter=args.contrast_jitter,
                                           geometric_jitter=geo)
    write_patch_store(store, cfg.output)
    write_pair_list(tr, store, os.path.join(cfg.output, "train_pairs.txt"))
    write_pair_list(te, store, os.path.join(cfg.output, "test_pairs.txt"))
    print(f"wrote {len(store)} patches, {len(tr)} train and {len(te)} test pairs to {cfg.output}")
    return 0


def cmd_stats(cfg, args):
    _require(cfg, "dataset", "pairs", "output")
    store = load_patch_store(cfg.dataset)
    pairs = load_pair_list(cfg.pairs, store, role="train")
    patches = store.patches[pairs.patch_indices()]
    stats = compute_norm_stats(equalize_all(patches) if cfg.hist_eq else patches)
    out = {
        "mean": stats.mean,
        "std": stats.std,
        "hist_eq": bool(cfg.hist_eq),
        "dataset": cfg.dataset,
        "pairs": cfg.pairs,
        "n_patches": int(len(patches)),
        **provenance(cfg),
    }
    _makedirs_for(cfg.output)
    with open(cfg.output, "w") as fh:
        json.dump(out, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"mean = {stats.mean!r}, std = {stats.std!r} over {len(patches)} patches (hist_eq={bool(cfg.hist_eq)})")
    return 0


def read_stats(path):
    if not os.path.exists(path):
        raise ConfigError(f"stats file {path} does not exist")
    try:
        with open(path) as fh:
            d = json.load(fh)
        return Preprocessor(bool(d["hist_eq"]), NormStats(float(d["mean"]), float(d["std"])))
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise IntegrityError(f"stats file {path} is malformed: {exc}") from None


def _sample(n, k, seed):
    if n <= k:
        return np.arange(n)
    return np.sort(np.random.default_rng(seed).choice(n, k, replace=False))


def cmd_train(cfg, args):
    _require(cfg, "dataset", "pairs", "output")
    if cfg.resume is None:
        _require(cfg, "stats")
    margin = cfg.resolved_margin()
    store = load_patch_store(cfg.dataset)
    pairs = load_pair_list(cfg.pairs, store, role="train")
    if cfg.augment:
        pairs = PairList(expand_training_set(pairs.pairs, ALL_TAGS), "train", pairs.declared_size)
    os.makedirs(cfg.output, exist_ok=True)
    checkpoint_path = os.path.join(cfg.output, "checkpoint-{epoch:04d}.pdm")

    if cfg.resume:
        model, state, start_epoch, trace, meta = load_checkpoint(cfg.resume)
        pre = _preprocessor_of(model)
        margin = meta["margin"]
        log.info("resuming from epoch %d", start_epoch)
    else:
        pre = read_stats(cfg.stats)
        cfg.hist_eq = pre.hist_eq
        model = init_model(cfg.arch, cfg.seed)
        calib = pairs.patch_indices()
        calib = calib[_sample(len(calib), CALIBRATION_PATCHES, cfg.seed)]
        calibrate_batchnorm(model, pre.apply(store.patches[calib]))
        if margin is None:
            pick = _sample(len(pairs), cfg.margin_pairs, cfg.seed)
            x1 = pre.apply(store.patches[[pairs[i].idx1 for i in pick]])
            x2 = pre.apply(store.patches[[pairs[i].idx2 for i in pick]])
            margin = estimate_margin(model, (x1, x2))
        state = AdadeltaState(lr=cfg.lr, weight_decay=cfg.weight_decay, lr_scales={"stn.": cfg.stn_lr_scale})
        start_epoch, trace = 0, []
    model.metadata.update({
        **provenance(cfg),
        "preprocess": pre.to_dict(),
        "stats_id": _stats_id(pre.to_dict()),
        "margin": margin,
    })
    print(f"margin = {margin!r}")
    schedule = TrainSchedule(cfg.epochs, cfg.batch_size, cfg.shuffle_seed, margin, cfg.checkpoint_every)
    result = train(model, PairDataset(store, pairs, pre), schedule, state, start_epoch, trace, checkpoint_path)
    model.eval()
    save_model(model, os.path.join(cfg.output, "model.pdm"))
    write_loss_trace(result.trace, os.path.join(cfg.output, "loss.csv"), provenance_comments(cfg))
    if result.trace:
        last = [t[2] for t in result.trace if t[1] == result.trace[-1][1]]
        print(f"final epoch mean loss = {float(np.mean(last))!r}")
    return 0


def cmd_eval(cfg, args):
    _require(cfg, "model", "dataset", "pairs", "output")
    model = load_model(cfg.model).eval()
    pre = _preprocessor_of(model)
    _check_patch_size(model)
    store = load_patch_store(cfg.dataset)
    pairs = load_pair_list(cfg.pairs, store, role="test")
    scored = score_pairs(model, pairs, store, pre, batch_size=cfg.batch_size)
    meta = {**provenance(cfg), "model_id": _file_id(cfg.model), "dataset": cfg.dataset, "pairs": cfg.pairs}
    report = evaluate(scored, bins=args.bins, metadata=meta)
    write_report(report, cfg.output, provenance_comments(cfg))
    with open(os.path.join(cfg.output, "scores.csv"), "w", newline="") as fh:
        for line in provenance_comments(cfg):
            fh.write(f"# {line}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["pair", "idx1", "idx2", "label", "distance"])
        for i, p in enumerate(pairs):
            w.writerow([i, p.idx1, p.idx2, p.label, repr(float(scored.distances[i]))])
    print(f"FPR@95 = {report.fpr_at_95:.6f}")
    print(f"PR-AUC = {report.pr_auc:.6f}")
    if args.top_errors:
        fp, fn = top_errors(scored, args.top_errors)
        path = os.path.join(cfg.output, "top_errors.csv")
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["kind", "rank", "pair", "idx1", "idx2", "distance"])
            for kind, sel in (("false_positive", fp), ("false_negative", fn)):
                for rank, i in enumerate(sel):
                    p = pairs[int(i)]
                    w.writerow([kind, rank, int(i), p.idx1, p.idx2, repr(float(scored.distances[i]))])
                    print(f"{kind} #{rank}: pair {int(i)} (patches {p.idx1}, {p.idx2}) distance {scored.distances[i]:.4f}")
    return 0


def read_patches(path, count=None):
    """Patches from an ``.npy`` array (N, 64, 64) or an image tiled with 64x64 patches in row-major order."""
    if not os.path.exists(path):
        raise ConfigError(f"patch file {path} does not exist")
    if path.endswith(".npy"):
        arr = np.load(path, allow_pickle=False)
        if arr.ndim == 2:
            arr = arr[None]
        if arr.ndim == 4 and arr.shape[1] == 1:
            arr = arr[:, 0]
        if arr.ndim != 3 or arr.shape[1:] != (PATCH, PATCH):
            raise DimensionError(f"{path}: expected patches of shape (N, {PATCH}, {PATCH}), got {arr.shape}")
        if arr.dtype != np.uint8:
            raise IngestionError(f"{path}: patches must be uint8, got {arr.dtype}")
    else:
        try:
            with Image.open(path) as img:
                pix = np.asarray(img.convert("L"))
        except OSError as exc:
            raise IngestionError(f"{path}: cannot read image ({exc})") from None
        h, w = pix.shape
        if h % PATCH or w % PATCH:
            raise DimensionError(f"{path}: image of {w}x{h} is not a grid of {PATCH}x{PATCH} patches")
        arr = pix.reshape(h // PATCH, PATCH, w // PATCH, PATCH).transpose(0, 2, 1, 3).reshape(-1, PATCH, PATCH)
    return arr[:count] if count else arr


def write_descriptors(path, desc, meta):
    """CSV (``.csv``) with ``#`` header lines, otherwise the binary tensor container."""
    _makedirs_for(path)
    if path.endswith(".csv"):
        with open(path, "w", newline="") as fh:
            for k in sorted(meta):
                fh.write(f"# {k} {json.dumps(meta[k], sort_keys=True)}\n")
            w = csv.writer(fh, lineterminator="\n")
            for row in desc:
                w.writerow([repr(float(v)) for v in row])
    else:
        container.write_container(path, "descriptors", "eval", meta, {"descriptors": desc.astype(np.float32)})


def read_descriptors(path):
    if not os.path.exists(path):
        raise ConfigError(f"descriptor file {path} does not exist")
    if path.endswith(".csv"):
        try:
            arr = np.loadtxt(path, delimiter=",", comments="#", ndmin=2, dtype=np.float64)
        except ValueError as exc:
            raise IntegrityError(f"{path}: malformed descriptor CSV ({exc})") from None
        return arr
    _, _, _, tensors = container.read_container(path)
    if "descriptors" not in tensors:
        raise ModelFormatError(f"{path} holds no descriptor tensor")
    return tensors["descriptors"].astype(np.float64)


def cmd_describe(cfg, args):
    _require(cfg, "model", "output")
    if not args.patches:
        raise ConfigError("missing required option: --patches")
    model = load_model(cfg.model).eval()
    pre = _preprocessor_of(model)
    _check_patch_size(model)
    raw = read_patches(args.patches, args.count)
    desc = describe(model, pre.apply(raw), batch_size=cfg.batch_size)
    meta = {**provenance(cfg), "model_id": _file_id(cfg.model), "stats_id": _stats_id(pre.to_dict()),
            "patches": args.patches}
    write_descriptors(cfg.output, desc, meta)
    print(f"wrote {len(desc)} descriptors of dimension {desc.shape[1]} to {cfg.output}")
    return 0


def cmd_match(cfg, args):
    _require(cfg, "output")
    a, b = read_descriptors(args.a), read_descriptors(args.b)
    nn, dist = match_descriptors(a, b)
    matched = dist <= args.threshold
    _makedirs_for(cfg.output)
    with open(cfg.output, "w", newline="") as fh:
        for line in provenance_comments(cfg):
            fh.write(f"# {line}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index_a", "index_b", "distance", "match"])
        for i in range(len(a)):
            w.writerow([i, int(nn[i]), repr(float(dist[i])), int(matched[i])])
    print(f"{int(matched.sum())} of {len(a)} descriptors matched at threshold {args.threshold}")
    return 0


def _makedirs_for(path):
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)


# -- argument parsing -----------------------------------------------------------

def _add_common(p, *names):
    p.add_argument("--config", help="JSON file with RunConfig keys; flags override it")
    p.add_argument("--output", "-o", help="output file or directory")
    for name in names:
        if name == "seed":
            p.add_argument("--seed", type=int)
        elif name == "batch_size":
            p.add_argument("--batch-size", dest="batch_size", type=int)
        else:
            p.add_argument("--" + name.replace("_", "-"), dest=name)


def _bool_flag(p, name, help):
    p.add_argument(f"--{name.replace('_', '-')}", dest=name, action="store_true", default=None, help=help)
    p.add_argument(f"--no-{name.replace('_', '-')}", dest=name, action="store_false", help=argparse.SUPPRESS)


def build_parser():
    parser = argparse.ArgumentParser(prog="patchdesc", description="Siamese CNN patch descriptors")
    parser.add_argument("--version", action="version", version=f"patchdesc {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic dataset in the on-disk layout")
    _add_common(p, "seed")
    p.add_argument("--points", type=int, default=200)
    p.add_argument("--per-point", dest="per_point", type=int, default=4)
    p.add_argument("--train-fraction", dest="train_fraction", type=float, default=0.5)
    p.add_argument("--pairs-per-point", dest="pairs_per_point", type=int, default=1)
    p.add_argument("--contrast-jitter", dest="contrast_jitter", type=float, default=0.0)
    p.add_argument("--geometric-jitter", dest="geometric_jitter", type=float, nargs=3,
                   metavar=("DEGREES", "LOG_SCALE", "PIXELS"))
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("stats", help="normalisation statistics of a training split")
    _add_common(p, "dataset", "pairs")
    _bool_flag(p, "hist_eq", "equalise histograms before computing statistics")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("train", help="train a descriptor network")
    _add_common(p, "dataset", "pairs", "stats", "arch", "resume", "seed", "batch_size")
    _bool_flag(p, "augment", "expand the training pairs by rotations and flips")
    p.add_argument("--margin", help="'auto' (twice the mean initial distance) or a number")
    p.add_argument("--margin-pairs", dest="margin_pairs", type=int, help="pairs sampled for the auto margin")
    p.add_argument("--epochs", type=int)
    p.add_argument("--shuffle-seed", dest="shuffle_seed", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--stn-lr-scale", dest="stn_lr_scale", type=float,
                   help="learning-rate multiplier for the localisation network")
    p.add_argument("--weight-decay", dest="weight_decay", type=float)
    p.add_argument("--checkpoint-every", dest="checkpoint_every", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a pair list and write ROC/PR/histogram CSVs")
    _add_common(p, "model", "dataset", "pairs", "batch_size")
    p.add_argument("--bins", type=int, default=50)
    p.add_argument("--top-errors", dest="top_errors", type=int, default=0,
                   help="list the N worst false positives and false negatives")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("describe", help="compute descriptors for a patch file")
    _add_common(p, "model", "batch_size")
    p.add_argument("--patches", help=".npy (N, 64, 64) uint8 array or an image tiled with 64x64 patches")
    p.add_argument("--count", type=int, help="keep only the first N patches")
    p.set_defaults(func=cmd_describe)

    p = sub.add_parser("match", help="nearest-neighbour matching of two descriptor files")
    _add_common(p)
    p.add_argument("a", help="query descriptors")
    p.add_argument("b", help="database descriptors")
    p.add_argument("--threshold", type=float, required=True)
    p.set_defaults(func=cmd_match)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = build_config(args)
        return args.func(cfg, args)
    except (ModelFormatError, IntegrityError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INTEGRITY
    except NumericAbort as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, IngestionError, ParseError, RoleError, DimensionError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
