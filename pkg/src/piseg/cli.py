"""Command-line entry point: ``piseg {synth,train,infer,eval,gradcheck,ablate}``.

Exit codes: 0 success, 1 validation failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import model as M
from .data import AugmentConfig, SyntheticSpec, load_pgm, save_pgm, synth_dataset
from .errors import PisegError
from .inference import STEP_PRESETS, plan_windows, predict_full
from .metrics import IOU_THRESHOLDS, evaluate_case, summarize
from .tensor import load_tensor, save_tensor

log = logging.getLogger("piseg")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _read_config(path) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file not found: {p}")
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file {p} is not valid JSON: {exc}") from None


def _model_config(args, cfg: dict) -> M.ModelConfig:
    base = M.PRESETS[args.preset] if getattr(args, "preset", None) else M.PRESETS["toy"]
    d = base.to_dict()
    d.update(cfg.get("model", {}))
    for key in ("input_size", "embed_dim", "patch_size", "window_size", "num_classes", "in_channels", "variant",
                "precision"):
        val = getattr(args, key, None)
        if val is not None:
            d[key] = val
    if getattr(args, "no_deep_supervision", False):
        d["deep_supervision"] = False
    return M.ModelConfig.from_dict(d)


def _train_config(args, cfg: dict, model_cfg: M.ModelConfig):
    from .train import TrainConfig

    d = dict(cfg.get("train", {}))
    for key in ("lr", "batch_size", "seed", "val_interval", "step_fraction", "init_checkpoint"):
        val = getattr(args, key, None)
        if val is not None:
            d[key] = val
    if getattr(args, "iters", None) is not None:
        d["max_iters"] = args.iters
    if getattr(args, "no_augment", False):
        d["augment"] = AugmentConfig.disabled().to_dict()
    d.setdefault("deep_supervision", model_cfg.deep_supervision)
    return TrainConfig.from_dict(d)


def _add_model_flags(p):
    p.add_argument("--config", help="JSON file with optional 'model' and 'train' sections")
    p.add_argument("--preset", choices=sorted(M.PRESETS), help="base model configuration (default: toy)")
    p.add_argument("--input-size", type=int)
    p.add_argument("--embed-dim", type=int)
    p.add_argument("--patch-size", type=int, choices=(4, 8))
    p.add_argument("--window-size", type=int)
    p.add_argument("--num-classes", type=int)
    p.add_argument("--in-channels", type=int)
    p.add_argument("--variant", choices=("full", "sa_only", "dw_only"))
    p.add_argument("--precision", choices=("train32", "verify64"))
    p.add_argument("--no-deep-supervision", action="store_true")


def _add_train_flags(p):
    p.add_argument("--data", required=True, help="dataset directory written by 'synth'")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--iters", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--val-interval", type=int)
    p.add_argument("--step-fraction", type=float)
    p.add_argument("--init-checkpoint")
    p.add_argument("--no-augment", action="store_true")


# ----------------------------------------------------------------------------

def cmd_synth(args) -> int:
    cfg = _read_config(args.config).get("synth", {})
    for key in ("image_size", "num_classes", "seed", "in_channels"):
        val = getattr(args, key)
        if val is not None:
            cfg[key] = val
    spec = SyntheticSpec.from_dict(cfg)
    manifest = synth_dataset(spec, args.n_train, args.n_val, args.n_test, args.out)
    print(json.dumps({k: len(v) for k, v in manifest["splits"].items()}))
    return EXIT_OK


def cmd_train(args) -> int:
    from . import plotting
    from .train import train

    cfg = _read_config(args.config)
    model_cfg = _model_config(args, cfg)
    train_cfg = _train_config(args, cfg, model_cfg)
    out = Path(args.out)
    tlog, _ = train(model_cfg, train_cfg, args.data, out)
    summary = tlog.to_dict()
    summary["model"] = model_cfg.to_dict()
    summary["train"] = train_cfg.to_dict()
    (out / "train_summary.json").write_text(json.dumps(summary, indent=1) + "\n")
    plotting.loss_curve(tlog.losses, out / "loss_curve.png", tlog.val)
    print(json.dumps({"final_loss": tlog.losses[-1], "best_val_dsc": tlog.best_val_dsc,
                      "final_checkpoint": tlog.final_checkpoint, "wall_time": round(tlog.wall_time, 2)}))
    return EXIT_OK


def cmd_infer(args) -> int:
    from . import plotting

    store, cfg = M.load(args.checkpoint)
    if cfg is None:
        raise UsageError(f"{args.checkpoint} carries no model config")
    image = load_pgm(args.image)
    cin = cfg.in_channels
    if image.shape[0] % cin:
        raise UsageError(f"image height {image.shape[0]} is not a multiple of {cin} channels")
    image = image.reshape(cin, image.shape[0] // cin, image.shape[1])
    crop = args.crop or cfg.input_size
    if crop != cfg.input_size:
        raise UsageError(f"crop {crop} differs from the model input size {cfg.input_size}")
    fraction = STEP_PRESETS[args.step_preset] if args.step_preset else args.step_fraction
    plan = plan_windows(image.shape[1:], crop, fraction)
    prob, mask = predict_full(image, M.SegmentationModel(store, cfg), plan)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_tensor(prob, out.with_name(out.name + ".prob.t22"))
    save_pgm(mask.astype(np.uint8), out.with_name(out.name + ".mask.pgm"), normalized=False)
    plotting.prediction_panel(image, mask, out.with_name(out.name + ".png"), num_classes=cfg.num_classes)
    print(json.dumps({"windows": len(plan.origins), "stride": plan.stride, "prob": str(out) + ".prob.t22",
                      "mask": str(out) + ".mask.pgm"}))
    return EXIT_OK


def _pairs(pred: Path, gt: Path):
    if pred.is_dir() != gt.is_dir():
        raise UsageError("--pred and --gt must both be files or both be directories")
    if pred.is_file():
        return [(pred.stem, pred, gt)]
    if not pred.is_dir():
        raise UsageError(f"prediction path not found: {pred}")
    out = []
    for p in sorted(pred.glob("*.pgm")):
        g = gt / p.name
        if not g.exists():
            raise UsageError(f"no ground truth for {p.name} in {gt}")
        out.append((p.stem, p, g))
    if not out:
        raise UsageError(f"no .pgm files in {pred}")
    return out


def cmd_eval(args) -> int:
    from . import plotting

    pairs = _pairs(Path(args.pred), Path(args.gt))
    loaded = [(cid, load_pgm(p, normalize=False), load_pgm(g, normalize=False)) for cid, p, g in pairs]
    k = args.num_classes or max(2, 1 + max(max(int(p.max()), int(g.max())) for _, p, g in loaded))
    reports = []
    for cid, pred, gt in loaded:
        prob = None
        if args.prob:
            prob_path = Path(args.prob)
            if prob_path.is_dir():
                prob_path = prob_path / f"{cid}.prob.t22"
            full = load_tensor(prob_path)
            prob = 1.0 - full[0] if full.ndim == 3 else full
        reports.append(evaluate_case(cid, pred, gt, k, prob))
    report = summarize(reports, k)
    text = json.dumps(report, indent=1)
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text + "\n")
        with open(out.with_suffix(".csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["id", "class", "dsc", "hd95", "hd95_flag"])
            for r in reports:
                for c in range(1, k):
                    w.writerow([r.case_id, c, f"{r.dsc[c]:.4f}", f"{r.hd95[c]:.4f}", r.hd95_flags.get(c, "")])
        plotting.iou_sweep(IOU_THRESHOLDS, report["mean"]["iou_per_threshold"], out.with_suffix(".png"))
    print(text)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_suite

    results = run_suite(args.size, range(args.seeds))
    for r in results:
        print(r.line())
    ok = all(r.passed for r in results)
    print("gradcheck: " + ("all passed" if ok else "FAILURES"))
    return EXIT_OK if ok else EXIT_FAIL


def cmd_ablate(args) -> int:
    from . import plotting
    from .train import ablate, write_ablation_csv

    cfg = _read_config(args.config)
    model_cfg = _model_config(args, cfg)
    train_cfg = _train_config(args, cfg, model_cfg)
    report = ablate(model_cfg, train_cfg, args.data, args.variants, args.seeds)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.json").write_text(json.dumps(report, indent=1) + "\n")
    write_ablation_csv(report, out / "ablation.csv")
    plotting.ablation_bars(report, out / "ablation.png")
    print(json.dumps({"summary": report["summary"], "direction": report["direction"], "flagged": report["flagged"]}))
    if report["flagged"]:
        log.warning("directional check failed: %s", ", ".join(report["flagged"]))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="piseg", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic segmentation dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n-train", type=int, default=8)
    p.add_argument("--n-val", type=int, default=2)
    p.add_argument("--n-test", type=int, default=2)
    p.add_argument("--image-size", type=int)
    p.add_argument("--num-classes", type=int)
    p.add_argument("--in-channels", type=int, choices=(1, 3))
    p.add_argument("--seed", type=int)
    p.add_argument("--config", help="JSON file with a 'synth' section")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model")
    _add_model_flags(p)
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="sliding-window prediction for one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True, help="input PGM")
    p.add_argument("--out", required=True, help="output prefix")
    p.add_argument("--crop", type=int)
    p.add_argument("--step-fraction", type=float, default=STEP_PRESETS["default"])
    p.add_argument("--step-preset", choices=sorted(STEP_PRESETS))
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="DSC / HD95 / IoU-sweep report")
    p.add_argument("--pred", required=True, help="predicted mask PGM or directory")
    p.add_argument("--gt", required=True, help="ground-truth mask PGM or directory")
    p.add_argument("--prob", help="probability tensor file or directory of {id}.prob.t22")
    p.add_argument("--num-classes", type=int)
    p.add_argument("--out", help="write JSON here (plus .csv and .png alongside)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--size", choices=("tiny", "primitives"), default="tiny")
    p.add_argument("--seeds", type=int, default=5)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", help="compare full / sa_only / dw_only blocks")
    _add_model_flags(p)
    _add_train_flags(p)
    p.add_argument("--variants", nargs="+", default=["full", "sa_only", "dw_only"],
                   choices=("full", "sa_only", "dw_only"))
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"piseg {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (PisegError, FileNotFoundError, OSError) as exc:
        print(f"piseg {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
