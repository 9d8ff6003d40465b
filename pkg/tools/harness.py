"""
Experiment orchestration: data -> [burn-in] -> split training -> pair
harvest -> attack -> report. Also the unsplit reference trainer, alpha
sweeps, activation dumps and leakage diagnostics.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from tools import numcore as nc
from tools.attack import evaluate_attack, harvest_pairs, to_uint8, train_attacker, write_ppm
from tools.audit import log_event
from tools.config import ConfigError, SessionConfig
from tools.datasets import Dataset, gen_synthetic, load_cifar10_bin, train_test_split
from tools.model import (
    AdamState,
    LayerKind,
    SplitModel,
    accuracy,
    adam_step,
    forward_client,
    forward_server,
    save_checkpoint,
)
from tools.nopeek_loss import NoPeekWeights, attribute_loss, nopeek_loss
from tools.splitnet import (
    EVAL_SAMPLES,
    EpochMetrics,
    TrainingLog,
    build_session_model,
    client_burnin,
    iter_batches,
    run_loopback,
    safe_dcor,
)

log = logging.getLogger("nopeek.harness")

HOLDOUT_FRACTION = 0.2


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


@dataclass
class ExperimentReport:
    rows: list[dict] = field(default_factory=list)
    attack: dict | None = None
    probes: dict[str, float] = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    seed: int = 0

    @property
    def columns(self) -> list[str]:
        return list(self.rows[0]) if self.rows else ["epoch"]

    @property
    def summary(self) -> dict:
        last = self.rows[-1] if self.rows else {}
        out = {k: v for k, v in last.items() if k != "epoch"}
        if self.attack:
            out["attacker_mse"] = self.attack["mse"]
            out["attacker_l2_median"] = self.attack["median"]
        out.update({f"probe_{k}": v for k, v in self.probes.items()})
        return out

    def to_csv(self) -> str:
        lines = [",".join(self.columns)]
        for row in self.rows:
            cells = (str(v) if k == "epoch" else repr(float(v)) for k, v in row.items())
            lines.append(",".join(cells))
        return "\n".join(lines) + "\n"

    def write(self, out_dir: str | Path, stem: str = "report") -> tuple[Path, Path]:
        """<stem>.csv (per-epoch rows) and <stem>.json (everything)."""
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        csv_path, json_path = out_dir / f"{stem}.csv", out_dir / f"{stem}.json"
        csv_path.write_text(self.to_csv(), encoding="utf-8")
        payload = {"seed": self.seed, "config": self.config, "rows": self.rows,
                   "attack": self.attack, "probes": self.probes, "summary": self.summary}
        json_path.write_text(json.dumps(payload, indent=2, sort_keys=True), encoding="utf-8")
        return csv_path, json_path


def report_rows(epochs: list[EpochMetrics], heads) -> list[dict]:
    rows = []
    for em in epochs:
        row = {"epoch": em.epoch, "train_loss": em.train_loss}
        row.update({f"acc_{h}": em.accuracy[h] for h in heads})
        row["dcor_xz"] = em.dcor_xz
        row["dcor_yz"] = em.dcor_yz
        if em.dcor_sz is not None:
            row["dcor_sz"] = em.dcor_sz
        rows.append(row)
    return rows


# ---------------------------------------------------------------------------
# Data
# ---------------------------------------------------------------------------


def make_dataset(cfg: SessionConfig) -> Dataset:
    if cfg.dataset == "cifar10":
        if not cfg.data_path:
            raise ConfigError("dataset = cifar10 needs data_path", key="data_path")
        return load_cifar10_bin(cfg.data_path)
    return gen_synthetic(cfg.dataset, cfg.n_samples, cfg.seed)


def split_holdout(ds: Dataset, seed: int) -> tuple[Dataset, Dataset]:
    """(defender train, held-out); attack pairs only ever come from held-out rows."""
    return train_test_split(ds, 1.0 - HOLDOUT_FRACTION, nc.Rng(seed).substream("holdout"))


# ---------------------------------------------------------------------------
# Unsplit reference
# ---------------------------------------------------------------------------


def train_unsplit(cfg: SessionConfig, dataset: Dataset) -> TrainingLog:
    """
    Single-process training on the same model, batches and optimizer settings
    as a split session. With alpha1 = 0 and a 64-bit wire, its batch losses
    equal the split server's bit for bit.
    """
    heads = list(cfg.heads)
    head_classes = {h: dataset.labels[h].shape[1] for h in heads}
    model = build_session_model(cfg, dataset.X.shape[1], dataset.image_shape, head_classes)
    out = TrainingLog(role="unsplit", model=model)
    if cfg.burnin_mode != "off" and cfg.burnin_iters > 0:
        out.burnin = client_burnin(model, cfg, dataset)

    w = NoPeekWeights(cfg.alpha1, cfg.alpha2)
    opt = AdamState(model.parameters(), lr=cfg.lr, decay=cfg.lr_decay)
    batch_rng = nc.Rng(cfg.seed).substream("batches")
    protected = dataset.labels[cfg.protect] if cfg.protect else None
    n_eval = min(EVAL_SAMPLES, dataset.n)
    for epoch in range(cfg.epochs):
        losses, correct, seen = [], dict.fromkeys(heads, 0.0), 0
        for idx in iter_batches(batch_rng.permutation(dataset.n), cfg.batch_size):
            X = dataset.X[idx]
            ys = {h: dataset.labels[h][idx] for h in heads}
            Z = forward_client(model, X)
            logits = forward_server(model, Z)
            if protected is not None:
                loss = attribute_loss(protected[idx], Z, logits, ys, w, cfg.protect)
            else:
                loss = nopeek_loss(X, Z, logits, ys, w)
            nc.backward(loss)
            adam_step(opt)
            losses.append(loss.item())
            for h in heads:
                correct[h] += accuracy(logits[h], ys[h]) * len(idx)
            seen += len(idx)
        out.batch_losses.extend(losses)
        opt.end_epoch()
        Z_eval = forward_client(model, dataset.X[:n_eval]).value
        out.epochs.append(EpochMetrics(
            epoch=epoch,
            train_loss=float(np.mean(losses)),
            accuracy={h: correct[h] / seen for h in heads},
            dcor_xz=safe_dcor(dataset.X[:n_eval], Z_eval),
            dcor_yz=safe_dcor(dataset.labels[heads[0]][:n_eval], Z_eval),
            dcor_sz=safe_dcor(protected[:n_eval], Z_eval) if protected is not None else None,
        ))
    return out


# ---------------------------------------------------------------------------
# Diagnostics
# ---------------------------------------------------------------------------


def linear_probe_accuracy(
    Z_train,
    y_train,
    Z_test=None,
    y_test=None,
    *,
    steps: int = 300,
    lr: float = 0.05,
    seed: int = 0,
) -> float:
    """
    Post-hoc softmax-regression probe from Z to a one-hot attribute.

    Z is standardized with train statistics. Returns accuracy on the test
    pair if given, else on the training pair.
    """
    Z_train, y_train = nc.as_matrix(Z_train), nc.as_matrix(y_train)
    mean = Z_train.mean(axis=0, keepdims=True)
    std = Z_train.std(axis=0, keepdims=True)
    std = np.where(std > 1e-12, std, 1.0)
    rng = nc.Rng(seed).substream("probe")
    W = nc.parameter(rng.normal(Z_train.shape[1], y_train.shape[1], 0.0, 0.01), "probe.W")
    b = nc.parameter(np.zeros((1, y_train.shape[1])), "probe.b")
    opt = AdamState([W, b], lr=lr, decay=1.0)
    Zn = (Z_train - mean) / std
    for _ in range(steps):
        loss = nc.softmax_cross_entropy(nc.add_row(nc.Tensor(Zn) @ W, b), y_train)
        nc.backward(loss)
        adam_step(opt)
    if Z_test is None:
        Z_test, y_test = Z_train, y_train
    logits = ((nc.as_matrix(Z_test) - mean) / std) @ W.value + b.value
    return accuracy(logits, nc.as_matrix(y_test))


def dcor_profile(model: SplitModel, X) -> list[tuple[int, str, float]]:
    """(layer index, kind, dcor(X, layer output)) for every client layer."""
    X = nc.as_matrix(X)
    return [
        (i, layer.spec.kind.value, safe_dcor(X, out.value))
        for i, (layer, out) in enumerate(zip(model.layers, model.layer_outputs(X)))
    ]


def _layer_image_shape(model: SplitModel, layer: int, dataset: Dataset) -> tuple[tuple, str]:
    spec = model.layers[layer].spec
    if spec.patch is not None and spec.kind is LayerKind.PATCH_DENSE:
        p = spec.patch
        shape, layout = (p.out_height, p.out_width, p.out_channels), "hwc"
    elif spec.kind is LayerKind.RELU and layer > 0 and model.layers[layer - 1].spec.patch:
        p = model.layers[layer - 1].spec.patch
        shape, layout = (p.out_height, p.out_width, p.out_channels), "hwc"
    elif dataset.image_shape and spec.out_dim == int(np.prod(dataset.image_shape)):
        shape, layout = dataset.image_shape, dataset.layout
    else:
        raise ConfigError(f"layer {layer} output ({spec.out_dim} units) has no image shape")
    if shape[2] > 3:
        raise ConfigError(f"layer {layer} has {shape[2]} channels; at most 3 can be rendered")
    return shape, layout


def dump_activation_images(
    model: SplitModel,
    dataset: Dataset,
    out_dir: str | Path,
    *,
    layer: int | None = None,
    limit: int = 16,
) -> list[Path]:
    """
    One P6 PPM per sample of a client layer's output, min-max scaled per image.

    `layer` defaults to the first locally connected layer, else the input.
    """
    client_layers = model.layers[: model.split_index]
    if layer is None:
        layer = next((i for i, lyr in enumerate(client_layers) if lyr.spec.patch), 0)
    if not 0 <= layer < len(client_layers):
        raise ConfigError(f"layer {layer} is not a client layer (0..{len(client_layers) - 1})")
    (h, w, c), layout = _layer_image_shape(model, layer, dataset)
    X = dataset.X[:limit]
    acts = model.layer_outputs(X)[layer].value
    if layout == "chw":
        images = acts.reshape(-1, c, h, w).transpose(0, 2, 3, 1)
    else:
        images = acts.reshape(-1, h, w, c)
    out_dir = Path(out_dir)
    return [write_ppm(out_dir / f"act_l{layer}_{i:04d}.ppm", to_uint8(img))
            for i, img in enumerate(images)]


# ---------------------------------------------------------------------------
# Experiments
# ---------------------------------------------------------------------------


def run_experiment(
    cfg: SessionConfig,
    dataset: Dataset | None = None,
    *,
    attack: bool = True,
    checkpoint: str | Path | None = None,
) -> ExperimentReport:
    """Full pipeline on one config. Deterministic given (config, seed).

    If `checkpoint` is given the trained model is saved there (NPKM).
    """
    ds = (dataset or make_dataset(cfg)).standardized()
    train, held = split_holdout(ds, cfg.seed)
    client_log, _ = run_loopback(cfg, train)
    model = client_log.model
    if checkpoint is not None:
        save_checkpoint(model, checkpoint)

    report = ExperimentReport(
        rows=report_rows(client_log.epochs, cfg.heads),
        config=cfg.model_dump(mode="json"),
        seed=cfg.seed,
    )
    if attack:
        pairs = harvest_pairs(model, held.X, seed=cfg.seed, leak_fraction=cfg.leak_fraction)
        dec = train_attacker(pairs, cfg.attack_epochs, cfg.attack_lr,
                             batch_size=cfg.attack_batch, seed=cfg.seed)
        report.attack = evaluate_attack(dec, pairs).summary()
    if cfg.protect:
        Z_train = forward_client(model, train.X).value
        Z_held = forward_client(model, held.X).value
        for attr in (cfg.protect, cfg.heads[0]):
            report.probes[attr] = linear_probe_accuracy(
                Z_train, train.labels[attr], Z_held, held.labels[attr], seed=cfg.seed
            )
    log_event("experiment_done", seed=cfg.seed, alpha1=cfg.alpha1, **{
        k: round(v, 6) for k, v in report.summary.items()
    })
    return report


@dataclass
class SweepReport:
    alphas: list[float]
    reports: list[ExperimentReport]

    def rows(self) -> list[dict]:
        out = []
        for alpha, rep in zip(self.alphas, self.reports):
            s = rep.summary
            head = next(k for k in rep.columns if k.startswith("acc_"))
            out.append({
                "alpha": alpha,
                "accuracy": s[head],
                "dcor_xz": s["dcor_xz"],
                "attacker_mse": s.get("attacker_mse", float("nan")),
            })
        return out

    def to_csv(self) -> str:
        lines = ["alpha,accuracy,dcor_xz,attacker_mse"]
        for r in self.rows():
            lines.append(",".join(repr(float(r[k])) for k in ("alpha", "accuracy", "dcor_xz",
                                                              "attacker_mse")))
        return "\n".join(lines) + "\n"


def _sweep_one(cfg_values: dict, alpha: float, dataset: Dataset | None,
               out_dir: str | None) -> ExperimentReport:
    cfg = SessionConfig(**{**cfg_values, "alpha1": alpha})
    report = run_experiment(cfg, dataset)
    if out_dir:
        report.write(out_dir, stem=f"report_alpha{alpha:g}")
    return report


def sweep_alpha(
    cfg: SessionConfig,
    alphas,
    dataset: Dataset | None = None,
    *,
    workers: int = 1,
    out_dir: str | Path | None = None,
) -> SweepReport:
    """One experiment per alpha1; the joined CSV is the privacy-utility curve."""
    alphas = [float(a) for a in alphas]
    if not alphas:
        raise ConfigError("sweep needs at least one alpha", key="alphas")
    values = cfg.model_dump()
    out = str(out_dir) if out_dir else None
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_sweep_one, values, a, dataset, out) for a in alphas]
            reports = [f.result() for f in futures]
    else:
        reports = [_sweep_one(values, a, dataset, out) for a in alphas]
    sweep = SweepReport(alphas, reports)
    if out_dir:
        (Path(out_dir) / "sweep.csv").write_text(sweep.to_csv(), encoding="utf-8")
    return sweep


def render_summary(paths) -> str:
    """Fixed-width table of report JSON summaries (one row per file)."""
    rows = []
    for path in paths:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        rows.append((Path(path).stem, data.get("config", {}).get("alpha1"), data["summary"]))
    keys = sorted({k for _, _, s in rows for k in s})
    header = ["report", "alpha1", *keys]
    lines = ["  ".join(f"{h:>14}" for h in header)]
    for stem, alpha, s in rows:
        cells = [stem, "" if alpha is None else f"{alpha:g}"]
        cells += [f"{s[k]:.4f}" if isinstance(s.get(k), (int, float)) else "-" for k in keys]
        lines.append("  ".join(f"{c:>14}" for c in cells))
    return "\n".join(lines)
