"""Command-line surface: train / predict / eval / oracle / synth / fuse.

Exit codes: 0 success, 1 usage or config error, 2 data error, 3 numeric
failure. Every command resolves one flat config (defaults < --config file
< --set overrides < dedicated flags), persists it alongside its outputs,
and derives all randomness from the single --seed value.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from . import config as cfgmod
from . import data as datamod
from . import metrics as metricsmod
from .errors import ConfigError, DataError, NumericError
from .model import preset_config
from .propagation import make_bright_line_demo, segment_by_propagation
from .sampling import binarize, fused_prediction
from .staple import staple_fuse
from .training import TrainConfig, train


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _write_mask_png(mask01: np.ndarray, path) -> None:
    Image.fromarray((np.asarray(mask01, dtype=np.uint8) * 255)).save(path)


def _write_soft_png16(soft: np.ndarray, path) -> None:
    arr = np.clip(np.asarray(soft, dtype=np.float64), 0.0, 1.0)
    Image.fromarray((arr * 65535.0).round().astype(np.uint16)).save(path)


def _read_gray01(path) -> np.ndarray:
    img = Image.open(path)
    arr = np.asarray(img)
    if arr.ndim == 3:
        arr = np.asarray(img.convert("L"))
    if arr.dtype == np.uint16 or (arr.dtype == np.int32 and img.mode in ("I", "I;16")):
        return arr.astype(np.float64) / 65535.0
    return arr.astype(np.float64) / 255.0


def _resolved(args, extra_flags: dict | None = None) -> dict:
    overrides = {}
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, _, v = item.partition("=")
        overrides[k.strip()] = v
    cfg = cfgmod.resolve(args.config, overrides)
    if getattr(args, "seed", None) is not None:
        cfg["seed"] = args.seed
    if getattr(args, "preset", None) is not None:
        cfg["preset"] = args.preset
    for key, value in (extra_flags or {}).items():
        if value is not None:
            cfg[key] = value
    return cfg


def _persist_run_config(cfg: dict, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    cfgmod.persist(cfg, out_dir / "run_config.txt")
    for k in sorted(cfg):
        if cfg[k] is not None:
            print(f"config {k} = {cfg[k]}")


def _model_config(cfg: dict):
    return preset_config(cfg["preset"], encoder_variant=cfg.get("model.encoder_variant", "base"),
                         **cfgmod.model_overrides(cfg))


def cmd_train(args) -> int:
    cfg = _resolved(args, {"out.dir": args.out, "train.total_steps": args.total_steps})
    out_dir = Path(cfg["out.dir"])
    if cfg["data.root"] is None:
        raise DataError("no dataset root configured (data.root or CROSSDIFF_DATA_ROOT)")
    mc = _model_config(cfg)
    tags = cfg["data.tags"].split(",") if cfg["data.tags"] else None
    dataset = datamod.load_dataset(cfg["data.root"], mc.image_side, mc.diff_side, tags)
    tc = TrainConfig(
        alpha=cfg["train.alpha"], beta=cfg["train.beta"], lr=cfg["train.lr"],
        batch_size=cfg["train.batch_size"], total_steps=cfg["train.total_steps"],
        seed=cfg["seed"], weight_decay=cfg["train.weight_decay"],
        clip_norm=cfg["train.clip_norm"], preset=cfg["preset"],
        log_every=cfg["train.log_every"], checkpoint_every=cfg["train.checkpoint_every"],
    )
    _persist_run_config(cfg, out_dir)
    bundle = train(tc, dataset, out_dir=out_dir, model_config=mc,
                   resume=args.resume)
    print(f"trained {bundle.step} steps on {len(dataset)} samples "
          f"-> {out_dir / 'checkpoint.ckpt'}")
    return 0


def cmd_predict(args) -> int:
    cfg = _resolved(args, {"predict.theta": args.theta, "predict.ensemble": args.ensemble})
    bundle = datamod.load_checkpoint(args.checkpoint, inference_only=args.inference_only)
    model = datamod.model_from_bundle(bundle, inference_only=args.inference_only)
    image_dir = Path(args.image_dir)
    if not image_dir.is_dir():
        raise DataError(f"image directory {image_dir} not found")
    files = sorted(p for p in image_dir.iterdir()
                   if p.suffix.lower() in datamod.IMAGE_EXTS)
    if not files:
        raise DataError(f"no images found in {image_dir}")
    out_dir = Path(args.out)
    for sub in ("masks", "soft", "staple"):
        (out_dir / sub).mkdir(parents=True, exist_ok=True)
    _persist_run_config(cfg, out_dir)

    n = cfg["predict.ensemble"]
    theta = cfg["predict.theta"]
    side = model.config.image_side
    for i, path in enumerate(files):
        img01 = datamod._load_image(path, side)
        image = (img01 * 2.0 - 1.0).transpose(2, 0, 1)
        seeds = [int(np.random.SeedSequence([cfg["seed"], i, k]).generate_state(1)[0])
                 for k in range(n)]
        pred = fused_prediction(model, image, theta=theta, n=n, seeds=seeds,
                                staple_tol=cfg["staple.tol"],
                                staple_max_iter=cfg["staple.max_iter"])
        _write_mask_png(pred.mask, out_dir / "masks" / f"{path.stem}.png")
        _write_soft_png16(pred.consensus, out_dir / "soft" / f"{path.stem}.png")
        sidecar = {"prior": None, "iterations": None, "p": None, "q": None,
                   "theta": theta, "ensemble": n, "seeds": seeds}
        if pred.staple is not None:
            sidecar.update({
                "prior": pred.staple.prior,
                "iterations": pred.staple.iterations,
                "p": list(map(float, pred.staple.sensitivities)),
                "q": list(map(float, pred.staple.specificities)),
            })
        (out_dir / "staple" / f"{path.stem}.json").write_text(json.dumps(sidecar, indent=1))
        print(f"predicted {path.stem} -> {out_dir / 'masks' / (path.stem + '.png')}")
    return 0


def _pair_dirs(pred_dir: Path, gt_dir: Path):
    """Match *.png stems; returns [(name, [(pred_path, gt_path), ...])]."""
    pred_subs = sorted(d for d in pred_dir.iterdir() if d.is_dir()) if pred_dir.is_dir() else []
    if pred_subs and all((gt_dir / d.name).is_dir() for d in pred_subs):
        groups = [(d.name, d, gt_dir / d.name) for d in pred_subs]
    else:
        groups = [(pred_dir.name, pred_dir, gt_dir)]
    out = []
    for name, pd, gd in groups:
        preds = {p.stem: p for p in pd.glob("*.png")}
        gts = {p.stem: p for p in gd.glob("*.png")}
        missing_gt = sorted(set(preds) - set(gts))
        missing_pred = sorted(set(gts) - set(preds))
        if missing_gt or missing_pred:
            raise DataError(
                f"{name}: unmatched stems; no ground truth for {missing_gt}, "
                f"no prediction for {missing_pred}"
            )
        if not preds:
            raise DataError(f"{name}: no .png masks found")
        out.append((name, [(preds[s], gts[s]) for s in sorted(preds)]))
    return out


def cmd_eval(args) -> int:
    cfg = _resolved(args)
    pred_dir, gt_dir = Path(args.pred_dir), Path(args.gt_dir)
    if not pred_dir.is_dir() or not gt_dir.is_dir():
        raise DataError("both prediction and ground-truth directories must exist")
    groups = _pair_dirs(pred_dir, gt_dir)
    out_dir = Path(args.out) if args.out else None
    report: dict = {}

    records = []
    soft_all, gt_all = [], []
    for name, pairs in groups:
        loaded = []
        for pp, gp in pairs:
            soft = _read_gray01(pp)
            gt = (_read_gray01(gp) >= 0.5).astype(np.uint8)
            if soft.shape != gt.shape:
                raise DataError(f"{pp.name}: prediction {soft.shape} vs gt {gt.shape}")
            loaded.append((soft, gt))
        records.append(metricsmod.evaluate_dataset(
            [((s >= 0.5).astype(np.uint8), g) for s, g in loaded], name))
        soft_all.extend(s for s, _ in loaded)
        gt_all.extend(g for _, g in loaded)

    avg = metricsmod.weighted_average(records)
    table = metricsmod.format_eval_table(records, avg)
    print(table)
    report["datasets"] = [vars(r) for r in records]
    report["average"] = vars(avg)

    if args.sweep:
        rows = metricsmod.threshold_sweep(soft_all, gt_all)
        sweep_table = metricsmod.format_sweep_table(rows)
        print(sweep_table)
        report["sweep"] = metricsmod.sweep_rows_json(rows)

    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        _persist_run_config(cfg, out_dir)
        (out_dir / "report.json").write_text(json.dumps(report, indent=1))
        (out_dir / "report.txt").write_text(
            table + ("\n" + metricsmod.format_sweep_table(report_rows(report))
                     if args.sweep else "") + "\n")
    return 0


def report_rows(report: dict):
    return [(r["theta"], r["dice"], r["iou"]) for r in report.get("sweep", [])]


def _read_seeds_file(path) -> np.ndarray:
    rows = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        s = line.strip().replace(",", " ")
        if not s or s.startswith("#"):
            continue
        parts = s.split()
        if len(parts) != 3:
            raise DataError(f"{path}:{lineno}: expected 'x y label'")
        rows.append([int(parts[0]), int(parts[1]), int(parts[2])])
    if not rows:
        raise DataError(f"{path}: no seeds found")
    return np.asarray(rows)


def cmd_oracle(args) -> int:
    cfg = _resolved(args, {"oracle.sigma": args.sigma, "oracle.steps": args.steps,
                           "oracle.theta": args.theta})
    out_path = Path(args.out)
    if args.demo:
        image, seeds, gt = make_bright_line_demo()
    else:
        if not args.image or not args.seeds:
            raise ConfigError("oracle requires --image and --seeds (or --demo)")
        image = _read_gray01(args.image)
        seeds = _read_seeds_file(args.seeds)
        gt = None
    try:
        mask = segment_by_propagation(
            image, seeds, steps=cfg["oracle.steps"], theta=cfg["oracle.theta"],
            neighborhood=cfg["oracle.neighborhood"], sigma=cfg["oracle.sigma"],
        )
    except ValueError as e:
        raise DataError(str(e)) from e
    out_path.parent.mkdir(parents=True, exist_ok=True)
    _write_mask_png(mask, out_path)
    if gt is not None:
        print(f"demo dice: {metricsmod.dice(mask, gt):.4f}")
    print(f"oracle mask -> {out_path}")
    return 0


def cmd_synth(args) -> int:
    cfg = _resolved(args, {"synth.n": args.n, "synth.side": args.side})
    out_dir = Path(args.out)
    ids = datamod.synth_dataset(
        out_dir, cfg["synth.n"], cfg["synth.side"], cfg["seed"],
        n_cracks=(cfg["synth.n_cracks_min"], cfg["synth.n_cracks_max"]),
        width_px=(cfg["synth.width_min"], cfg["synth.width_max"]),
    )
    _persist_run_config(cfg, out_dir)
    print(f"wrote {len(ids)} synthetic samples under {out_dir / 'synthetic'}")
    return 0


def cmd_fuse(args) -> int:
    cfg = _resolved(args, {"predict.theta": args.theta})
    mask_dir = Path(args.mask_dir)
    files = sorted(mask_dir.glob("*.png"))
    if len(files) < 2:
        raise DataError(f"need >= 2 rater masks in {mask_dir}, found {len(files)}")
    raters = [(_read_gray01(p) >= 0.5).astype(np.uint8) for p in files]
    try:
        res = staple_fuse(raters, tol=cfg["staple.tol"], max_iter=cfg["staple.max_iter"])
    except ValueError as e:
        raise DataError(str(e)) from e
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    _write_mask_png(binarize(res.consensus, cfg["predict.theta"]), out_path)
    _write_soft_png16(res.consensus, out_path.with_name(out_path.stem + "_soft.png"))
    sidecar = {"prior": res.prior, "iterations": res.iterations,
               "p": list(map(float, res.sensitivities)),
               "q": list(map(float, res.specificities))}
    out_path.with_suffix(".json").write_text(json.dumps(sidecar, indent=1))
    print(f"fused {len(files)} raters -> {out_path}")
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="crossdiff",
                     description="Cross-conditional diffusion crack segmentation toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None, help="key=value config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config key")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--preset", choices=("desk", "full"), default=None)

    p = sub.add_parser("train", help="train a model")
    common(p)
    p.add_argument("--out", default="runs/train")
    p.add_argument("--total-steps", dest="total_steps", type=int, default=None)
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("predict", help="run ensemble + STAPLE prediction")
    common(p)
    p.add_argument("checkpoint")
    p.add_argument("image_dir")
    p.add_argument("--out", default="runs/predict")
    p.add_argument("--theta", type=float, default=None)
    p.add_argument("--ensemble", type=int, default=None)
    p.add_argument("--inference-only", action="store_true")
    p.set_defaults(fn=cmd_predict)

    p = sub.add_parser("eval", help="evaluate predictions against ground truth")
    common(p)
    p.add_argument("pred_dir")
    p.add_argument("gt_dir")
    p.add_argument("--sweep", action="store_true", help="emit the threshold-sweep table")
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("oracle", help="label-propagation segmentation")
    common(p)
    p.add_argument("--image", default=None)
    p.add_argument("--seeds", default=None, help="file of 'x y label' rows")
    p.add_argument("--out", default="oracle_mask.png")
    p.add_argument("--demo", action="store_true", help="use the bright-line demo instance")
    p.add_argument("--sigma", type=float, default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--theta", type=float, default=None)
    p.set_defaults(fn=cmd_oracle)

    p = sub.add_parser("synth", help="generate a synthetic crack dataset")
    common(p)
    p.add_argument("out")
    p.add_argument("--n", type=int, default=None)
    p.add_argument("--side", type=int, default=None)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("fuse", help="STAPLE-fuse a directory of rater masks")
    common(p)
    p.add_argument("mask_dir")
    p.add_argument("--out", default="fused.png")
    p.add_argument("--theta", type=float, default=None)
    p.set_defaults(fn=cmd_fuse)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 1
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return 2
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
