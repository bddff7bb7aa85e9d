"""Command-line entry points.

Exit codes: 0 success, 1 usage/config error, 2 runtime failure. Every
command writes only under its --out directory and echoes the resolved
configuration there.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from . import config as config_mod
from . import data, kernels, metrics, selftest, trainer
from .augment_gva import EnhancementNet, GvaConfig, gva_forward
from .autodiff import Tensor
from .config import ConfigError
from .network import load_checkpoint


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _build_parser() -> _Parser:
    p = _Parser(prog="ssmseg", description="Domain-generalizable selective "
                "state-space segmentation experiments")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", default=None, help="YAML config file")
        sp.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="SECTION.KEY=VALUE", help="config override")
        sp.add_argument("--out", required=True, help="output directory")

    sp = sub.add_parser("train", help="train on the configured source domains")
    common(sp)
    sp.add_argument("--progress", action="store_true")

    sp = sub.add_parser("eval", help="evaluate a checkpoint on one domain")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--domain", type=int, default=None,
                    help="domain to evaluate (default: data.held_out)")

    sp = sub.add_parser("sweep", help="leave-one-domain-out study")
    common(sp)
    sp.add_argument("--seeds", default="0,1,2", help="comma-separated seeds")
    sp.add_argument("--ablation", action="store_true",
                    help="run the four canonical component rows")
    sp.add_argument("--progress", action="store_true")

    sp = sub.add_parser("gen-data", help="export the synthetic domains as folders")
    common(sp)

    sp = sub.add_parser("preview-aug", help="write original/augmented image "
                        "pairs with PSNR/SSIM annotations")
    common(sp)
    sp.add_argument("--checkpoint", default=None,
                    help="trainer checkpoint providing enhancement weights")
    sp.add_argument("--n", type=int, default=8, help="number of images")

    sp = sub.add_parser("self-test", help="run the fast invariant suite")
    return p


def _prepare(args):
    cfg = config_mod.load_config(args.config)
    config_mod.apply_overrides(cfg, args.overrides)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    config_mod.dump_config(cfg, out / "resolved_config.yaml")
    (out / "run_info.json").write_text(json.dumps({
        "backend": kernels.BACKEND,
        "seed": cfg.train.seed,
        "data_seed": cfg.data.seed,
        "argv_overrides": args.overrides,
    }, indent=2, sort_keys=True))
    return cfg, out


def _build_datasets(cfg):
    d = cfg.data
    if d.folders:
        train_sets, test_sets = {}, {}
        for dom, path in sorted(d.folders.items()):
            ds = data.load_folder(path, int(dom), size=d.size, n_classes=d.n_classes)
            train_sets[int(dom)] = ds
            test_sets[int(dom)] = ds
        return train_sets, test_sets
    return data.make_default_domains(d.n_domains, d.train_per_domain,
                                     d.test_per_domain, d.seed, d.size,
                                     d.n_classes)


def _cmd_train(args) -> int:
    cfg, out = _prepare(args)
    train_sets, test_sets = _build_datasets(cfg)
    held = cfg.data.held_out
    ids = sorted(train_sets)
    if held is not None:
        plan = data.make_splits(ids, held)
        sources = {d: train_sets[d] for d in plan.source_domains}
    else:
        sources = train_sets
    tr = trainer.Trainer(cfg.network_config(), cfg.train_config(), sources, out)
    tr.run(progress=args.progress)
    tr.close()
    if held is not None:
        rep = trainer.evaluate(trainer.model_predictor(tr.model), test_sets[held])
        (out / "eval_report.json").write_text(json.dumps(rep, indent=2, sort_keys=True))
    return 0


def _cmd_eval(args) -> int:
    cfg, out = _prepare(args)
    train_sets, test_sets = _build_datasets(cfg)
    dom = args.domain if args.domain is not None else cfg.data.held_out
    if dom is None or dom not in test_sets:
        raise UsageError(f"no evaluation domain (have {sorted(test_sets)})")
    tr = trainer.Trainer(cfg.network_config(), cfg.train_config(),
                         train_sets, out_dir=None)
    tr.load_checkpoint(args.checkpoint)
    rep = trainer.evaluate(trainer.model_predictor(tr.model), test_sets[dom])
    (out / "eval_report.json").write_text(json.dumps(rep, indent=2, sort_keys=True))
    print(json.dumps({"domain": rep["domain"], "dice_mean": rep["dice_mean"],
                      "asd_mean": rep["asd_mean"]}, sort_keys=True))
    return 0


def _cmd_sweep(args) -> int:
    cfg, out = _prepare(args)
    train_sets, test_sets = _build_datasets(cfg)
    try:
        seeds = [int(s) for s in args.seeds.split(",") if s.strip() != ""]
    except ValueError as exc:
        raise UsageError(f"bad --seeds: {exc}")
    rows = trainer.CANONICAL_ABLATION if args.ablation else None
    report = trainer.run_sweep(cfg.network_config(), cfg.train_config(),
                               train_sets, test_sets, seeds, out,
                               ablation_rows=rows, progress=args.progress)
    print(trainer.format_sweep_table(report))
    return 0


def _cmd_gen_data(args) -> int:
    cfg, out = _prepare(args)
    train_sets, test_sets = _build_datasets(cfg)
    for dom in sorted(train_sets):
        data.export_folder(train_sets[dom], Path(out) / f"domain{dom}" / "train")
        data.export_folder(test_sets[dom], Path(out) / f"domain{dom}" / "test")
    print(f"wrote {len(train_sets)} domains under {out}")
    return 0


def _to_png(img01: np.ndarray) -> Image.Image:
    arr = (np.clip(img01, 0, 1).transpose(1, 2, 0) * 255).round().astype(np.uint8)
    return Image.fromarray(arr)


def _cmd_preview_aug(args) -> int:
    cfg, out = _prepare(args)
    train_sets, _ = _build_datasets(cfg)
    rng = np.random.default_rng(cfg.train.seed)
    phi = EnhancementNet(rng, GvaConfig(tau=cfg.gva.tau, n_blocks=cfg.gva.n_blocks))
    if args.checkpoint:
        arrays, _meta = load_checkpoint(args.checkpoint)
        phi_arrays = {k[len("phi."):]: v for k, v in arrays.items()
                      if k.startswith("phi.")}
        if phi_arrays:
            phi.load_state_arrays(phi_arrays)
    pairs_dir = Path(out) / "pairs"
    pairs_dir.mkdir(parents=True, exist_ok=True)
    records = []
    count = 0
    for dom in sorted(train_sets):
        for i, sample in enumerate(train_sets[dom].samples):
            if count >= args.n:
                break
            x = sample.image[None]
            x_aug = gva_forward(Tensor(x), phi, cfg.gva.tau, training=True).data[0]
            orig01 = data.un_normalize(sample.image)
            aug01 = data.un_normalize(x_aug)
            side = np.concatenate([orig01, aug01], axis=2)
            name = f"domain{dom}_{i:03d}.png"
            _to_png(side).save(pairs_dir / name)
            psnr_val = metrics.psnr(orig01, aug01)
            records.append({
                "file": f"pairs/{name}",
                "domain": dom,
                "gated": bool((x_aug != sample.image).any()),
                "psnr": psnr_val if np.isfinite(psnr_val) else "inf",
                "ssim": metrics.ssim(orig01, aug01),
            })
            count += 1
        if count >= args.n:
            break
    with open(Path(out) / "annotations.jsonl", "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    print(f"wrote {count} original/augmented pairs under {out}")
    return 0


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    try:
        if args.command == "train":
            return _cmd_train(args)
        if args.command == "eval":
            return _cmd_eval(args)
        if args.command == "sweep":
            return _cmd_sweep(args)
        if args.command == "gen-data":
            return _cmd_gen_data(args)
        if args.command == "preview-aug":
            return _cmd_preview_aug(args)
        if args.command == "self-test":
            return selftest.self_test()
        raise UsageError(f"unknown command {args.command!r}")
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - runtime failures exit 2
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


def entrypoint():  # console_scripts hook
    raise SystemExit(main())


if __name__ == "__main__":
    entrypoint()
