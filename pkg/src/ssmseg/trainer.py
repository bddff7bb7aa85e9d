"""Semantic-consistency training loop and experiment harness.

Each step draws a domain-balanced batch, forwards the original branch
and (when enabled) the globally-augmented branch through the same
network with fresh local-augmentation draws per branch, assembles
CE + Dice on both branches plus the weighted MSE consistency term, and
takes one decoupled-weight-decay adaptive step over all parameters
(network and enhancement net jointly) under a polynomial LR schedule.

Checkpoints capture parameters, optimizer moments, and RNG states, so a
restored run reproduces subsequent losses bitwise.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, asdict, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import augment_gva, data, losses, metrics, network
from .augment_gva import EnhancementNet, GvaConfig, gva_forward
from .autodiff import Tensor
from .network import NetworkConfig, SegmentationNetwork


@dataclass
class TrainConfig:
    iterations: int = 2000          # desk scale; the reference setting is 20000
    batch_size: int = 8
    base_lr: float = 3e-4
    lr_power: float = 0.9
    weight_decay: float = 1e-2
    lambda_consist: float = 0.1
    lsa_p: float = 0.75
    gva_tau: float = 0.4            # 0.03 for the darker MRI-style setting
    gva_n_blocks: int = 1
    enable_gva: bool = True
    enable_lsa: bool = True
    enable_consistency: bool = True
    grad_clip: float = 5.0
    seed: int = 0
    checkpoint_every_frac: float = 0.1
    augment_data: bool = True


def poly_lr(iteration: int, cfg: TrainConfig) -> float:
    """base_lr * (1 - iteration/max)^power."""
    frac = 1.0 - iteration / cfg.iterations
    return cfg.base_lr * frac ** cfg.lr_power


class AdamW:
    """Adaptive moments with decoupled weight decay (decay skipped for
    1D parameters: biases, norms, gains)."""

    def __init__(self, named_params: dict[str, Tensor], weight_decay: float,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = named_params
        self.weight_decay = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = {k: np.zeros_like(p.data) for k, p in named_params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in named_params.items()}
        self.steps = {k: 0 for k in named_params}

    def step(self, lr: float):
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            if self.weight_decay and p.data.ndim > 1:
                p.data = p.data * (1.0 - lr * self.weight_decay)
            self.steps[k] += 1
            t = self.steps[k]
            self.m[k] = self.b1 * self.m[k] + (1.0 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1.0 - self.b2) * g * g
            mh = self.m[k] / (1.0 - self.b1 ** t)
            vh = self.v[k] / (1.0 - self.b2 ** t)
            p.data = p.data - lr * mh / (np.sqrt(vh) + self.eps)


def clip_grads(params, max_norm: float) -> float:
    sq = 0.0
    for p in params:
        if p.grad is not None:
            sq += float((p.grad * p.grad).sum())
    norm = float(np.sqrt(sq))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


class Trainer:
    def __init__(self, net_cfg: NetworkConfig, cfg: TrainConfig,
                 source_sets: dict[int, data.DomainDataset],
                 out_dir: str | Path | None = None):
        self.cfg = cfg
        self.net_cfg = replace(net_cfg, lsa_p=cfg.lsa_p)
        self.out_dir = Path(out_dir) if out_dir is not None else None
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)

        ss = np.random.SeedSequence(cfg.seed)
        init_ss, data_ss, lsa_ss = ss.spawn(3)
        init_rng = np.random.default_rng(init_ss)
        self.data_rng = np.random.default_rng(data_ss)
        self.lsa_rng = np.random.default_rng(lsa_ss)

        self.model = SegmentationNetwork(self.net_cfg, init_rng)
        self.phi = EnhancementNet(init_rng, GvaConfig(tau=cfg.gva_tau,
                                                      n_blocks=cfg.gva_n_blocks))
        named = {f"net.{k}": v for k, v in self.model.named_parameters().items()}
        named.update({f"phi.{k}": v for k, v in self.phi.named_parameters().items()})
        self.named_params = named
        self.opt = AdamW(named, weight_decay=cfg.weight_decay)
        self.sampler = data.BalancedSampler(source_sets, cfg.batch_size,
                                            self.data_rng, augment=cfg.augment_data)
        self.iteration = 0
        self.loss_ema: float | None = None
        self.best_ema = float("inf")
        self._log_fh = None
        if self.out_dir is not None:
            self._log_fh = open(self.out_dir / "metrics.jsonl", "a")

    # -- single optimization step ------------------------------------

    def train_step(self) -> losses.LossBundle:
        cfg = self.cfg
        lr = poly_lr(self.iteration, cfg)
        x, y, _ = self.sampler.next_batch()
        for p in self.named_params.values():
            p.grad = None

        xt = Tensor(x)
        logits_o = self.model.forward(xt, training=True, rng=self.lsa_rng,
                                      lsa=cfg.enable_lsa)
        pred_o = ad.sigmoid(logits_o)
        ce_o = losses.ce_loss(pred_o, y)
        dice_o = losses.dice_loss(pred_o, y)
        ce_e = dice_e = consist = None
        if cfg.enable_gva:
            x_e = gva_forward(xt, self.phi, cfg.gva_tau, training=True)
            logits_e = self.model.forward(x_e, training=True, rng=self.lsa_rng,
                                          lsa=cfg.enable_lsa)
            pred_e = ad.sigmoid(logits_e)
            ce_e = losses.ce_loss(pred_e, y)
            dice_e = losses.dice_loss(pred_e, y)
            if cfg.enable_consistency:
                consist = losses.consistency_loss(pred_o, pred_e)
        try:
            total, bundle = losses.total_loss(ce_o, dice_o, ce_e, dice_e,
                                              consist, cfg.lambda_consist)
        except FloatingPointError:
            snap = self._diagnostic_snapshot(x, y)
            raise RuntimeError(f"non-finite loss at iteration {self.iteration}; "
                               f"diagnostic snapshot: {snap}")
        total.backward()
        clip_grads(self.named_params.values(), cfg.grad_clip)
        self.opt.step(lr)

        if self._log_fh is not None:
            rec = {"iteration": self.iteration, **bundle.as_dict(), "lr": lr}
            self._log_fh.write(json.dumps(rec, sort_keys=True) + "\n")
            self._log_fh.flush()
        self.iteration += 1
        t = bundle.total
        self.loss_ema = t if self.loss_ema is None else 0.9 * self.loss_ema + 0.1 * t
        return bundle

    def _diagnostic_snapshot(self, x, y) -> str:
        if self.out_dir is None:
            return "<no output directory>"
        path = self.out_dir / "diagnostic_failure.npz"
        arrays = {k: p.data for k, p in self.named_params.items()}
        arrays["batch_images"] = x
        arrays["batch_masks"] = y
        network.save_checkpoint(path, arrays, {"iteration": self.iteration})
        return str(path)

    # -- full run -------------------------------------------------------

    def run(self, progress: bool = False):
        cfg = self.cfg
        every = max(1, int(round(cfg.iterations * cfg.checkpoint_every_frac)))
        t0 = time.time()
        while self.iteration < cfg.iterations:
            bundle = self.train_step()
            it = self.iteration
            if self.out_dir is not None and (it % every == 0 or it == cfg.iterations):
                self.save_checkpoint(self.out_dir / f"ckpt_{it:06d}.npz")
                if self.loss_ema is not None and self.loss_ema < self.best_ema:
                    self.best_ema = self.loss_ema
                    self.save_checkpoint(self.out_dir / "best.npz")
            if progress and (it % 50 == 0 or it == cfg.iterations):
                print(f"  iter {it}/{cfg.iterations} total={bundle.total:.4f} "
                      f"({time.time() - t0:.0f}s)", flush=True)
        if self.out_dir is not None:
            self.save_checkpoint(self.out_dir / "final.npz")
        return self

    def close(self):
        if self._log_fh is not None:
            self._log_fh.close()
            self._log_fh = None

    def __del__(self):  # pragma: no cover - interpreter shutdown guard
        try:
            self.close()
        except Exception:
            pass

    # -- checkpointing ----------------------------------------------------

    def save_checkpoint(self, path: str | Path):
        arrays = {k: p.data for k, p in self.named_params.items()}
        for k in self.named_params:
            arrays[f"opt_m::{k}"] = self.opt.m[k]
            arrays[f"opt_v::{k}"] = self.opt.v[k]
        meta = {
            "iteration": self.iteration,
            "opt_steps": self.opt.steps,
            "loss_ema": self.loss_ema,
            "best_ema": self.best_ema if np.isfinite(self.best_ema) else None,
            "rng": {
                "data": self.data_rng.bit_generator.state,
                "lsa": self.lsa_rng.bit_generator.state,
            },
            "train_cfg": asdict(self.cfg),
            "net_cfg": asdict(self.net_cfg),
        }
        network.save_checkpoint(path, arrays, meta)

    def load_checkpoint(self, path: str | Path):
        arrays, meta = network.load_checkpoint(path)
        for k, p in self.named_params.items():
            p.data = np.ascontiguousarray(arrays[k])
            self.opt.m[k] = np.ascontiguousarray(arrays[f"opt_m::{k}"])
            self.opt.v[k] = np.ascontiguousarray(arrays[f"opt_v::{k}"])
        self.opt.steps = {k: int(v) for k, v in meta["opt_steps"].items()}
        self.iteration = int(meta["iteration"])
        self.loss_ema = meta["loss_ema"]
        self.best_ema = meta["best_ema"] if meta["best_ema"] is not None else float("inf")
        self.data_rng.bit_generator.state = meta["rng"]["data"]
        self.lsa_rng.bit_generator.state = meta["rng"]["lsa"]
        return meta


# -- evaluation --------------------------------------------------------


def model_predictor(model: SegmentationNetwork, batch_size: int = 8):
    """Inference-mode mask predictor over numpy image batches."""
    def predict(images: np.ndarray) -> np.ndarray:
        outs = []
        with ad.no_grad():
            for i in range(0, len(images), batch_size):
                logits = model.forward(images[i:i + batch_size], training=False)
                outs.append(network.predict_masks(logits.data))
        return np.concatenate(outs)
    return predict


def evaluate(predict_fn, dataset: data.DomainDataset) -> dict:
    """Per-sample Dice and ASD on one domain, aggregated per class.

    ``predict_fn`` maps [B,3,H,W] images to binary [B,K,H,W] masks; an
    injected oracle exercises the same path the model does. Samples with
    an empty prediction or target surface are excluded from ASD with a
    count."""
    images = np.stack([s.image for s in dataset.samples])
    targets = np.stack([s.mask for s in dataset.samples])
    preds = predict_fn(images)
    n, k = targets.shape[0], targets.shape[1]
    dice_vals = [[] for _ in range(k)]
    asd_vals = [[] for _ in range(k)]
    for i in range(n):
        for c in range(k):
            dice_vals[c].append(metrics.dice_coefficient(preds[i, c], targets[i, c]))
            try:
                asd_vals[c].append(metrics.average_surface_distance(
                    preds[i, c], targets[i, c]))
            except metrics.UndefinedMetricError:
                asd_vals[c].append(float("nan"))
    classes = {}
    for c in range(k):
        classes[str(c)] = {"dice": metrics.summarize(dice_vals[c]),
                           "asd": metrics.summarize(asd_vals[c])}
    dice_means = [classes[str(c)]["dice"]["mean"] for c in range(k)]
    asd_means = [classes[str(c)]["asd"]["mean"] for c in range(k)]
    return {
        "domain": dataset.domain_id,
        "n_samples": n,
        "classes": classes,
        "dice_mean": float(np.mean(dice_means)),
        "asd_mean": float(np.nanmean(np.asarray(asd_means, dtype=np.float64)))
        if not all(np.isnan(asd_means)) else float("nan"),
        "asd_excluded": int(sum(classes[str(c)]["asd"]["excluded"] for c in range(k))),
    }


# -- leave-one-domain-out sweep ---------------------------------------


CANONICAL_ABLATION = [
    {"label": "baseline", "enable_gva": False, "enable_lsa": False,
     "enable_consistency": False},
    {"label": "lsa_only", "enable_gva": False, "enable_lsa": True,
     "enable_consistency": False},
    {"label": "gva_consist", "enable_gva": True, "enable_lsa": False,
     "enable_consistency": True},
    {"label": "full", "enable_gva": True, "enable_lsa": True,
     "enable_consistency": True},
]


def run_sweep(net_cfg: NetworkConfig, train_cfg: TrainConfig,
              train_sets: dict[int, data.DomainDataset],
              test_sets: dict[int, data.DomainDataset],
              seeds: list[int], out_dir: str | Path,
              ablation_rows: list[dict] | None = None,
              keep_checkpoints: bool = False,
              progress: bool = False) -> dict:
    """Train one model per (row, seed, held-out domain) and report
    held-out Dice (x100) per task plus averages over tasks and seeds."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    domain_ids = sorted(train_sets)
    rows = ablation_rows or [{"label": "full"}]
    report = {"seeds": list(seeds), "domains": domain_ids, "rows": []}
    for row in rows:
        label = row.get("label", "run")
        toggles = {k: v for k, v in row.items() if k != "label"}
        per_task: dict[str, dict] = {}
        for held in domain_ids:
            per_task[str(held)] = {"per_seed": []}
        for seed in seeds:
            for held in domain_ids:
                plan = data.make_splits(domain_ids, held)
                sources = {d: train_sets[d] for d in plan.source_domains}
                cfg = replace(train_cfg, seed=seed, **toggles)
                run_dir = out_dir / "runs" / f"{label}_seed{seed}_held{held}"
                if not keep_checkpoints:
                    cfg = replace(cfg, checkpoint_every_frac=1.0)
                if progress:
                    print(f"[sweep] {label} seed={seed} held={held}", flush=True)
                tr = Trainer(net_cfg, cfg, sources, run_dir)
                tr.run(progress=False)
                tr.close()
                rep = evaluate(model_predictor(tr.model), test_sets[held])
                rep_path = run_dir / "eval_report.json"
                rep_path.write_text(json.dumps(rep, indent=2, sort_keys=True))
                per_task[str(held)]["per_seed"].append(100.0 * rep["dice_mean"])
                if not keep_checkpoints:
                    for f in run_dir.glob("*.npz"):
                        f.unlink()
        for held in domain_ids:
            vals = per_task[str(held)]["per_seed"]
            per_task[str(held)]["dice_mean"] = float(np.mean(vals))
        avg = float(np.mean([per_task[str(h)]["dice_mean"] for h in domain_ids]))
        report["rows"].append({"label": label, "toggles": toggles,
                               "per_task": per_task, "avg_dice": avg})
    (out_dir / "sweep_report.json").write_text(
        json.dumps(report, indent=2, sort_keys=True))
    (out_dir / "sweep_table.txt").write_text(format_sweep_table(report))
    return report


def format_sweep_table(report: dict) -> str:
    domain_ids = report["domains"]
    header = ["row".ljust(14)] + [f"held {d}".rjust(9) for d in domain_ids] + [
        "avg".rjust(9)]
    lines = ["  ".join(header)]
    for row in report["rows"]:
        cells = [row["label"].ljust(14)]
        for d in domain_ids:
            cells.append(f"{row['per_task'][str(d)]['dice_mean']:9.2f}")
        cells.append(f"{row['avg_dice']:9.2f}")
        lines.append("  ".join(cells))
    return "\n".join(lines) + "\n"
