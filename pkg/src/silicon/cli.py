"""Command-line entry point.

Subcommands mirror the package modules: synth, train, normalize, segment,
eval, verify-theory, gradcheck.  Diagnostics go to stderr; machine-readable
outputs go to files under --out.  Exit codes: 0 success, 1 validation
error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import traceback
from dataclasses import fields
from pathlib import Path

import numpy as np


class CliError(Exception):
    """User-facing validation problem; exits with code 1."""


def _msg(text: str):
    print(text, file=sys.stderr, flush=True)


def _fingerprint(name: str, resolved: dict):
    text = name + "".join(f"|{k}={resolved[k]}" for k in sorted(resolved))
    _msg(f"config fingerprint: {hashlib.sha256(text.encode()).hexdigest()[:12]}")


def _print_table(rows):
    width = max(len(r[0]) for r in rows)
    ok_all = True
    for name, value, tol, ok in rows:
        status = "PASS" if ok else "FAIL"
        ok_all &= ok
        _msg(f"  {name:<{width}}  {value:>12.4e}  (tol {tol:g})  {status}")
    return ok_all


def cmd_synth(args) -> int:
    from silicon import synthdata as sd

    spec = sd.SynthSpec(image_size=args.size, color_jitter=args.jitter,
                        noise_sigma=args.noise, seed=args.seed)
    _fingerprint("synth", vars(args))
    samples = sd.synth_set(spec, args.n, args.groups, np.random.default_rng(args.seed))
    sd.write_dataset(samples, args.out)
    _msg(f"wrote {args.n} images in {args.groups} groups to {args.out}")
    return 0


def cmd_train(args, overrides) -> int:
    from silicon import trainer

    cfg = trainer.load_config(args.config, overrides)
    if args.seed is not None:
        cfg = trainer.parse_config(f"seed = {args.seed}", base=cfg)
    _msg(f"config fingerprint: {cfg.fingerprint()}")
    out = Path(args.out)
    final = trainer.fit(cfg, out, resume_from=args.resume, progress=args.progress)
    _msg(f"final checkpoint: {final}")
    return 0


def _load_model(checkpoint):
    from silicon import nets, trainer

    ckpt = Path(checkpoint)
    if not (ckpt / "config.cfg").exists():
        raise CliError(f"checkpoint {ckpt} has no config.cfg")
    cfg = trainer.parse_config((ckpt / "config.cfg").read_text())
    model = nets.SiliconModel(cfg.model_config())
    nets.load_model_params(model, ckpt / "params")
    model.eval()
    return model


def _png_paths(directory) -> list:
    directory = Path(directory)
    if not directory.is_dir():
        raise CliError(f"not a directory: {directory}")
    paths = sorted(directory.glob("*.png"))
    if not paths:
        raise CliError(f"no .png files under {directory}")
    return paths


def cmd_normalize(args) -> int:
    from silicon import imagecore as ic
    from silicon import inference

    _fingerprint("normalize", vars(args))
    model = _load_model(args.checkpoint)
    template = ic.load_image(args.template)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    paths = _png_paths(args.sources)
    for path in paths:
        src = ic.load_image(path)
        res = inference.normalize_and_segment(template, [src], model,
                                              threshold=args.threshold)[0]
        ic.save_image(res.normalized_image, out / f"{path.stem}.norm.png")
        ic.save_mask(res.final_segmap.mask(), out / f"{path.stem}.mask.png")
    _msg(f"normalized {len(paths)} images into {out}")
    return 0


def cmd_segment(args) -> int:
    from silicon import imagecore as ic
    from silicon import inference

    _fingerprint("segment", vars(args))
    model = _load_model(args.checkpoint)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    paths = _png_paths(args.in_dir)
    for path in paths:
        mask = inference.segment_only(ic.load_image(path), model,
                                      threshold=args.threshold)
        ic.save_mask(mask, out / f"{path.stem}.mask.png")
    _msg(f"segmented {len(paths)} images into {out}")
    return 0


def _find_named(directory: Path, stem: str, suffixes) -> Path | None:
    for suffix in suffixes:
        p = directory / f"{stem}{suffix}"
        if p.exists():
            return p
    return None


def cmd_eval(args) -> int:
    from silicon import imagecore as ic
    from silicon import metrics
    from silicon import synthdata as sd

    _fingerprint("eval", vars(args))
    ds = sd.load_dataset(args.data, load_masks=True)
    pred_dir = Path(args.pred) if args.pred else None
    norm_dir = Path(args.normalized) if args.normalized else None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    per_image = []
    nmis, nmis_norm = {}, {}
    vec_groups, vec_groups_norm = {}, {}
    seg_scores = []
    for i, sid in enumerate(ds.ids):
        stem = f"{sid:05d}"
        row = {"id": sid, "group": ds.groups[i]}
        row["nmi"] = metrics.nmi(ds.images[i], ds.masks[i])
        nmis.setdefault(ds.groups[i], []).append(row["nmi"])
        try:
            vec_groups.setdefault(ds.groups[i], []).append(
                metrics.estimate_stain_vectors(ds.images[i]))
        except ValueError:
            pass
        if pred_dir is not None:
            p = _find_named(pred_dir, stem, (".mask.png", ".png"))
            if p is None:
                raise CliError(f"no prediction for image {stem} under {pred_dir}")
            d, j, pr, rc = metrics.dice_jaccard_prec_rec(ic.load_mask(p), ds.masks[i])
            row.update(dice=d, jaccard=j, precision=pr, recall=rc)
            seg_scores.append((d, j, pr, rc))
        if norm_dir is not None:
            p = _find_named(norm_dir, stem, (".norm.png", ".png"))
            if p is None:
                raise CliError(f"no normalized image for {stem} under {norm_dir}")
            n = metrics.nmi(ic.load_image(p), ds.masks[i])
            nmis_norm.setdefault(ds.groups[i], []).append(n)
            try:
                vec_groups_norm.setdefault(ds.groups[i], []).append(
                    metrics.estimate_stain_vectors(ic.load_image(p)))
            except ValueError:
                pass
        per_image.append(row)

    group_wscc = {g: metrics.wscc(v) for g, v in nmis.items()}
    report = metrics.MetricReport(per_image, group_wscc,
                                  _sd_table(metrics, vec_groups))
    (out / "metrics.csv").write_text(report.csv_text())

    summary = {
        "n_images": len(ds.ids),
        "wscc_per_group": {str(g): group_wscc[g] for g in sorted(group_wscc)},
        "stain_sd": report.stain_sd,
    }
    if seg_scores:
        arr = np.array(seg_scores)
        summary["segmentation_means"] = dict(
            zip(("dice", "jaccard", "precision", "recall"), arr.mean(axis=0).tolist()))
    if norm_dir is not None:
        wscc_norm = {g: metrics.wscc(v) for g, v in nmis_norm.items()}
        summary["wscc_per_group_normalized"] = {
            str(g): wscc_norm[g] for g in sorted(wscc_norm)}
        summary["stain_sd_normalized"] = _sd_table(metrics, vec_groups_norm)
        pre = [n for g in sorted(nmis) for n in nmis[g]]
        post = [n for g in sorted(nmis_norm) for n in nmis_norm[g]]
        if len(pre) == len(post) and len(pre) >= 5:
            summary["p_values_nmi_post_gt_pre"] = {
                "paired_t": metrics.paired_t(post, pre),
                "wilcoxon": metrics.wilcoxon_signed_rank(post, pre),
            }
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    _msg(f"wrote {out / 'metrics.csv'} and {out / 'summary.json'}")
    return 0


def _sd_table(metrics, vec_groups):
    usable = {g: v for g, v in vec_groups.items() if len(v) >= 2}
    if not usable:
        return {}
    sd = metrics.stain_vector_sd(usable)
    return {str(g): {stain: vals.tolist() for stain, vals in table.items()}
            for g, table in sd.items()}


def cmd_verify_theory(args) -> int:
    from silicon import theory

    _fingerprint("verify-theory", vars(args))
    rows = theory.run_verification(n_pairs=args.n_pairs, seed=args.seed)
    ok = _print_table(rows)
    _msg("theory verification: " + ("all checks passed" if ok else "FAILURES present"))
    return 0 if ok else 1


def cmd_gradcheck(args) -> int:
    from silicon.gradcheck import run_gradient_suite

    _fingerprint("gradcheck", vars(args))
    rows = run_gradient_suite(tol=args.tol)
    ok = _print_table(rows)
    _msg("gradient checks: " + ("all passed" if ok else "FAILURES present"))
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="silicon",
        description="Simultaneous nuclei segmentation and stain color "
                    "normalization of histological images.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--n", type=int, default=200, help="number of images")
    p.add_argument("--size", type=int, default=32, help="image side in pixels")
    p.add_argument("--groups", type=int, default=2, help="number of biopsy groups")
    p.add_argument("--seed", type=int, default=0, help="random seed")
    p.add_argument("--jitter", type=float, default=12.0,
                   help="max stain rotation per group, degrees")
    p.add_argument("--noise", type=float, default=0.01, help="sensor noise sigma")

    p = sub.add_parser("train", help="train the five networks",
                       epilog="Any config key can be overridden as --key value.")
    p.add_argument("--config", required=True, help="key = value config file")
    p.add_argument("--out", required=True, help="run directory for telemetry/checkpoints")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--resume", default=None, help="checkpoint directory to resume from")
    p.add_argument("--progress", action="store_true", help="print periodic progress")

    p = sub.add_parser("normalize", help="template-based color normalization")
    p.add_argument("--template", required=True, help="template image (PNG)")
    p.add_argument("--sources", required=True, help="directory of source PNGs")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--checkpoint", required=True, help="training checkpoint directory")
    p.add_argument("--threshold", type=float, default=0.5, help="mask threshold")

    p = sub.add_parser("segment", help="segment nuclei in images")
    p.add_argument("--in", dest="in_dir", required=True, help="directory of PNGs")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--checkpoint", required=True, help="training checkpoint directory")
    p.add_argument("--threshold", type=float, default=0.5, help="mask threshold")

    p = sub.add_parser("eval", help="evaluate color constancy and segmentation")
    p.add_argument("--data", required=True, help="synthetic dataset directory")
    p.add_argument("--pred", default=None, help="directory of predicted masks")
    p.add_argument("--normalized", default=None, help="directory of normalized images")
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("verify-theory", help="check the optimal-discriminator claim")
    p.add_argument("--n-pairs", type=int, default=100, help="random density pairs")
    p.add_argument("--seed", type=int, default=0, help="random seed")

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--tol", type=float, default=1e-4, help="relative error tolerance")

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        if argv and argv[0] == "train":
            args, extra = parser.parse_known_args(argv)
        else:
            args = parser.parse_args(argv)
            extra = []
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 1

    try:
        overrides = _parse_overrides(extra) if args.command == "train" else None
        if args.command == "synth":
            return cmd_synth(args)
        if args.command == "train":
            return cmd_train(args, overrides)
        if args.command == "normalize":
            return cmd_normalize(args)
        if args.command == "segment":
            return cmd_segment(args)
        if args.command == "eval":
            return cmd_eval(args)
        if args.command == "verify-theory":
            return cmd_verify_theory(args)
        if args.command == "gradcheck":
            return cmd_gradcheck(args)
        raise CliError(f"unknown command {args.command!r}")
    except (CliError, FileNotFoundError, ValueError) as exc:
        _msg(f"error: {exc}")
        return 1
    except Exception:
        traceback.print_exc()
        return 2


def _parse_overrides(extra) -> dict:
    from silicon.trainer import TrainConfig

    known = {f.name for f in fields(TrainConfig)}
    if len(extra) % 2 != 0:
        raise CliError(f"override arguments must come in --key value pairs, got {extra}")
    overrides = {}
    for flag, value in zip(extra[::2], extra[1::2]):
        if not flag.startswith("--"):
            raise CliError(f"expected an override flag, got {flag!r}")
        key = flag[2:].replace("-", "_")
        if key not in known:
            raise CliError(f"unknown config key {key!r}")
        overrides[key] = value
    return overrides


if __name__ == "__main__":
    raise SystemExit(main())
