"""saltseg command line: generate, train, predict, evaluate, ensemble.

Exit codes: 0 success, 2 configuration error, 3 data or I/O error,
4 numeric failure (non-finite values), 1 anything else.
"""
import argparse
import csv
import json
import logging
import re
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import data as D
from . import inference as I
from .config import RunManifest, content_hash, load_config
from .errors import ConfigurationError, DataError, SaltSegError
from .losses import competition_metric
from .model import ModelConfig, build_model
from .plotting import training_curves
from .serialization import load_checkpoint, read_weights, save_checkpoint, sidecar_path
from .trainer import Snapshot, ensemble_weights, recompute_bn_stats, train_kfold

log = logging.getLogger("saltseg")
SNAPSHOT_RE = re.compile(r"^snap_(\d+)_([0-9]*\.?[0-9]+)\.w$")


def _out_dir(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _resolved(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.train = replace(cfg.train, seed=args.seed)
    return cfg


def _manifest(command, cfg_dict, seed, inputs, out):
    m = RunManifest(command, cfg_dict, seed, {k: str(v) for k, v in inputs.items()})
    m.write(out)
    return m


# -- generate ------------------------------------------------------------------------

def cmd_generate(args):
    seed = 0 if args.seed is None else args.seed
    out = _out_dir(args)
    D.save_dataset(D.generate_synthetic(args.n, args.size, seed), out)
    _manifest("generate", {"n": args.n, "size": args.size}, seed, {}, out)
    log.info("wrote %d samples to %s", args.n, out)


# -- train ------------------------------------------------------------------------------

def _check_fits(samples, input_size, what):
    for s in samples:
        if max(s.image.shape) > input_size:
            raise ConfigurationError(f"{what}: model.input_size = {input_size} is smaller than image "
                                     f"{s.id} ({s.image.shape[0]}×{s.image.shape[1]})")


def cmd_train(args):
    cfg = _resolved(args)
    samples = D.load_root(args.data, require_masks=True)
    if not samples:
        raise DataError(f"{args.data}: no images found")
    _check_fits(samples, cfg.model.input_size, "config")
    out = _out_dir(args)
    manifest = _manifest("train", cfg.to_dict(), cfg.train.seed, {"data": args.data}, out)
    arts = train_kfold(samples, cfg.train.folds, cfg.train, cfg.model, out, log=log.info)
    for a in arts:
        for path in (a.checkpoint, a.ensemble_checkpoint):
            side = sidecar_path(path)
            meta = json.loads(side.read_text())
            meta["config_hash"] = manifest.config_hash
            side.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    (out / "curves.svg").write_text(training_curves([(a.fold, a.history) for a in arts],
                                                    f"config {manifest.config_hash}"))
    for a in arts:
        log.info("fold %d best val IoU %.4f", a.fold, a.best_val_iou)


# -- predict ----------------------------------------------------------------------------

def _expand_checkpoints(paths):
    out = []
    for p in map(Path, paths):
        if p.is_dir():
            found = sorted(p.glob("fold*.ens.w")) or sorted(p.glob("fold*.w"))
            if not found:
                raise DataError(f"{p}: no fold checkpoints found")
            out.extend(found)
        elif p.is_file():
            out.append(p)
        else:
            raise DataError(f"checkpoint {p} not found")
    return out


def _load_members(paths, samples):
    members = []
    for path in _expand_checkpoints(paths):
        model, meta = load_checkpoint(path)
        _check_fits(samples, model.config.input_size, f"checkpoint {path}")
        if "d_min" in meta and "d_max" in meta:
            lo, hi = meta["d_min"], meta["d_max"]
        else:
            lo, hi = D.depth_range(samples)
        members.append((model, lo, hi))
    return members


def _parse_sweep(text):
    try:
        lo, hi, step = (float(v) for v in text.split(","))
    except ValueError:
        raise ConfigurationError(f"--sweep {text!r}: expected lo,hi,step") from None
    if not (0 < lo <= hi < 1 and step > 0):
        raise ConfigurationError(f"--sweep {text!r}: need 0 < lo <= hi < 1 and step > 0")
    n = int(np.floor((hi - lo) / step + 1e-9)) + 1
    return [round(lo + i * step, 10) for i in range(n)]


def cmd_predict(args):
    cfg = _resolved(args)
    pconf = cfg.predict
    sweep = _parse_sweep(args.sweep) if args.sweep else None
    samples = D.load_root(args.data, require_masks=sweep is not None)
    if not samples:
        raise DataError(f"{args.data}: no images found")
    members = _load_members(args.checkpoint, samples)
    out = _out_dir(args)
    manifest = _manifest("predict", {"predict": pconf.to_dict()}, cfg.train.seed,
                         {"data": args.data, "checkpoints": ",".join(map(str, args.checkpoint))}, out)
    probs = I.predict_probabilities(members, samples, pconf)
    if args.dump_pgm:
        (out / "probabilities").mkdir(exist_ok=True)
        for s, p in zip(samples, probs):
            I.write_pgm16(out / "probabilities" / f"{s.id}.pgm", p)
    rows = [(s.id, D.rle_encode(I.postprocess(p, pconf))) for s, p in zip(samples, probs)]
    D.write_submission(out / "submission.csv", sorted(rows, key=lambda r: r[0]))
    if sweep:
        with open(out / "threshold_sweep.csv", "w", encoding="utf-8", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["threshold", "M"])
            for t in sweep:
                pc = replace(pconf, threshold=t)
                rep = competition_metric([I.postprocess(p, pc) for p in probs], [s.mask for s in samples])
                wr.writerow([repr(t), repr(rep.mean)])
    log.info("wrote %d predictions (config %s)", len(rows), manifest.config_hash)


# -- evaluate -------------------------------------------------------------------------------

def _read_predictions(pred, shapes):
    pred = Path(pred)
    if pred.is_dir():
        out = {}
        for p in sorted(pred.glob("*.png")):
            out[p.stem] = (D._read_gray(p) > 0.5).astype(np.uint8)
        return out
    if not pred.is_file():
        raise DataError(f"predictions {pred} not found")
    h, w = next(iter(shapes.values())) if shapes else (D.NATIVE_SIZE, D.NATIVE_SIZE)
    return {k: D.rle_decode(v) for k, v in D.read_submission(pred, h, w).items()}


def cmd_evaluate(args):
    gts = {s.id: s.mask for s in D.load_root(args.gt, require_masks=True)}
    preds = _read_predictions(args.pred, {k: v.shape for k, v in gts.items()})
    missing, extra = sorted(set(gts) - set(preds)), sorted(set(preds) - set(gts))
    if missing or extra:
        raise DataError(f"id mismatch: missing predictions for {missing}; no ground truth for {extra}")
    ids = sorted(gts)
    rep = competition_metric([preds[i] for i in ids], [gts[i] for i in ids], ids)
    out = _out_dir(args)
    rep.to_csv(out / "metric.csv")
    summary = {"M": rep.mean, "images": len(ids),
               "per_threshold": {f"{t:.2f}": dict(zip(("tp", "fp", "fn"), map(int, c)))
                                 for t, c in zip((0.5 + 0.05 * i for i in range(10)), rep.counts)}}
    (out / "metric.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    _manifest("evaluate", {}, 0, {"pred": args.pred, "gt": args.gt}, out)
    print(f"M = {rep.mean:.6f} over {len(ids)} images")


# -- ensemble ---------------------------------------------------------------------------------

def _read_snapshot_dir(path):
    path = Path(path)
    if not path.is_dir():
        raise DataError(f"snapshot directory {path} not found")
    pool = []
    for f in sorted(path.iterdir()):
        m = SNAPSHOT_RE.match(f.name)
        if m:
            pool.append(Snapshot(read_weights(f), float(m.group(2)), int(m.group(1))))
    if not pool:
        raise DataError(f"{path}: no snap_<epoch>_<iou>.w files")
    meta_path = path / "model.json"
    if not meta_path.is_file():
        raise DataError(f"{path}: missing model.json with the model configuration")
    meta = json.loads(meta_path.read_text())
    pool.sort(key=Snapshot.key)
    return pool, meta


def cmd_ensemble(args):
    cfg = _resolved(args)
    alpha = cfg.train.ensemble_alpha if args.alpha is None else args.alpha
    if not 0 < alpha < 1:
        raise ConfigurationError(f"--alpha = {alpha}: must lie in (0, 1)")
    pool, meta = _read_snapshot_dir(args.snapshots)
    model = build_model(ModelConfig.from_dict(meta["model_config"]), 0)
    model.load_state_dict(ensemble_weights(pool, alpha))
    if args.data:
        samples = D.load_root(args.data)
        lo, hi = meta.get("d_min"), meta.get("d_max")
        if lo is None or hi is None:
            lo, hi = D.depth_range(samples)
        recompute_bn_stats(model, samples, lo, hi, cfg.train.batch_size)
    out = _out_dir(args)
    extra = {k: meta[k] for k in ("d_min", "d_max", "fold", "seed") if k in meta}
    extra.update(ensemble_alpha=alpha, snapshots=[f"{s.epoch}:{s.val_iou}" for s in pool],
                 bn_stats="recomputed" if args.data else "averaged",
                 config_hash=content_hash({"alpha": alpha}))
    save_checkpoint(out / "ensemble.w", model, extra)
    _manifest("ensemble", {"alpha": alpha}, 0, {"snapshots": args.snapshots, "data": args.data or ""}, out)
    log.info("ensembled %d snapshots into %s", len(pool), out / "ensemble.w")


# -- entry point --------------------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(prog="saltseg", description="Salt body segmentation pipeline")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_help):
        p.add_argument("--config", help="INI run configuration")
        p.add_argument("--seed", type=int, help="overrides train.seed")
        p.add_argument("--out", required=True, help=out_help)

    p = sub.add_parser("generate", help="write a synthetic dataset")
    common(p, "dataset directory")
    p.add_argument("--n", type=int, default=8)
    p.add_argument("--size", type=int, default=D.NATIVE_SIZE)
    p.set_defaults(fn=cmd_generate)

    p = sub.add_parser("train", help="k-fold training")
    common(p, "run directory")
    p.add_argument("--data", required=True)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("predict", help="write a submission CSV")
    common(p, "output directory")
    p.add_argument("--checkpoint", nargs="+", required=True, help="checkpoint files or run directories")
    p.add_argument("--data", required=True)
    p.add_argument("--dump-pgm", action="store_true", help="also write 16-bit PGM probability maps")
    p.add_argument("--sweep", help="lo,hi,step threshold sweep scored against the data's masks")
    p.set_defaults(fn=cmd_predict)

    p = sub.add_parser("evaluate", help="score predictions against ground truth")
    common(p, "report directory")
    p.add_argument("--pred", required=True, help="submission CSV or directory of mask PNGs")
    p.add_argument("--gt", required=True, help="dataset directory with masks/")
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("ensemble", help="weight-average a snapshot directory")
    common(p, "output directory")
    p.add_argument("--snapshots", required=True)
    p.add_argument("--alpha", type=float)
    p.add_argument("--data", help="dataset used to re-estimate batchnorm statistics")
    p.set_defaults(fn=cmd_ensemble)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        args.fn(args)
    except SaltSegError as exc:
        print(f"saltseg {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"saltseg {args.command}: I/O error: {exc}", file=sys.stderr)
        return 3
    except FloatingPointError as exc:
        print(f"saltseg {args.command}: numeric error: {exc}", file=sys.stderr)
        return 4
    return 0


if __name__ == "__main__":
    sys.exit(main())
