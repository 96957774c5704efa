"""Training loop, evaluation, prediction, and the learning-rate schedule.

Every stochastic choice (shuffle order, augmentation op, pyramid dropout)
derives its seed from (run seed, epoch, step), so a run is a pure function
of its config and resuming from a checkpoint continues the exact sequence
an uninterrupted run would have produced.
"""

import hashlib
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
import torch
from torch.utils.data import DataLoader, Dataset

from .config import RunConfig
from .data import (BitemporalPair, DatasetLayout, augment, colorize,
                   load_image, load_label, save_image)
from .errors import (CheckpointVersionError, DatasetError, DimensionError,
                     ScheduleError)
from .losses import total_loss
from .metrics import ConfusionCounts, MetricReport, confusion, metrics
from .network import (DenseSwinNet, ModelConfig, load_checkpoint,
                      save_checkpoint)

logger = logging.getLogger(__name__)

TRAIN_STATE_VERSION = 1


def derive_seed(*parts) -> int:
    """Stable 63-bit seed from a tuple of labels and integers."""
    digest = hashlib.blake2s("/".join(map(str, parts)).encode(), digest_size=8)
    return int.from_bytes(digest.digest(), "little") >> 1


def lr_schedule(epoch: int, cfg: RunConfig) -> float:
    """Learning rate for one epoch: linear decay to 0, or constant."""
    if not 0 <= epoch < cfg.epochs:
        raise ScheduleError(
            f"epoch {epoch} outside schedule range [0, {cfg.epochs})"
        )
    if cfg.lr_policy == "constant":
        return cfg.lr
    return cfg.lr * (1.0 - epoch / cfg.epochs)


def pair_to_tensors(pair: BitemporalPair):
    """uint8 pair to float CHW tensors in [0, 1]; label becomes (1, H, W)."""
    a = torch.from_numpy(pair.a.copy()).permute(2, 0, 1).float() / 255.0
    b = torch.from_numpy(pair.b.copy()).permute(2, 0, 1).float() / 255.0
    label = None
    if pair.label is not None:
        label = torch.from_numpy(pair.label.copy()).unsqueeze(0).float()
    return a, b, label


class ChangePairDataset(Dataset):
    """Loads dataset pairs lazily; optional per-epoch dihedral augmentation."""

    def __init__(self, layout: DatasetLayout, split: str, seed: int = 0,
                 augment_ops: Tuple[int, ...] = (), train: bool = False):
        self.layout = layout
        self.names = layout.names(split)
        self.seed = seed
        self.augment_ops = tuple(augment_ops)
        self.train = train
        self.epoch = 0

    def set_epoch(self, epoch: int) -> None:
        self.epoch = epoch

    def __len__(self) -> int:
        return len(self.names)

    def __getitem__(self, index: int):
        pair = self.layout.load_pair(self.names[index])
        if self.train and self.augment_ops:
            rng = np.random.default_rng(
                derive_seed(self.seed, "augment", self.epoch, index)
            )
            op = self.augment_ops[int(rng.integers(0, len(self.augment_ops)))]
            pair = augment(pair, op)
        a, b, label = pair_to_tensors(pair)
        return a, b, label


@dataclass
class TrainResult:
    log_path: Path
    best_path: Path
    last_path: Path
    best_f1: float
    epochs_run: int


class TrainingLog:
    """Append-only JSONL log with a monotone epoch index."""

    def __init__(self, path):
        self.path = Path(path)
        self.rows: List[dict] = []
        if self.path.is_file():
            self.rows = [json.loads(ln) for ln in
                         self.path.read_text().splitlines() if ln.strip()]

    def append(self, row: dict) -> None:
        if self.rows and row["epoch"] <= self.rows[-1]["epoch"]:
            raise ValueError(
                f"epoch {row['epoch']} not after {self.rows[-1]['epoch']}"
            )
        self.rows.append(row)
        with self.path.open("a") as fh:
            fh.write(json.dumps(row) + "\n")

    @classmethod
    def load(cls, path) -> "TrainingLog":
        log = cls.__new__(cls)
        log.path = Path(path)
        if not log.path.is_file():
            raise DatasetError(f"training log not found: {path}")
        log.rows = [json.loads(ln) for ln in
                    log.path.read_text().splitlines() if ln.strip()]
        return log


def _epoch_order(n: int, seed: int, epoch: int) -> List[int]:
    gen = torch.Generator().manual_seed(derive_seed(seed, "order", epoch))
    return torch.randperm(n, generator=gen).tolist()


def _evaluate_model(model: DenseSwinNet, dataset: ChangePairDataset,
                    threshold: float):
    """Per-image reports plus the micro-aggregated (summed counts) report."""
    model.eval()
    per_image = []
    total = ConfusionCounts(0, 0, 0, 0)
    with torch.no_grad():
        for idx in range(len(dataset)):
            a, b, label = dataset[idx]
            out = model(a.unsqueeze(0), b.unsqueeze(0))
            pred = (out.cm >= threshold).long()[0, 0].numpy()
            counts = confusion(pred, label[0].long().numpy())
            total = total + counts
            per_image.append((dataset.names[idx], metrics(counts), counts))
    return per_image, metrics(total), total


def train(cfg: RunConfig, resume: Optional[str] = None,
          deterministic: bool = False,
          max_steps: Optional[int] = None) -> TrainResult:
    """Run the optimization loop; returns log and checkpoint locations.

    The best-validation-F1 model goes to ``best.pt``; ``last.pt`` carries
    the full training state (model, optimizer, epoch, step) for resuming.
    When the dataset has no ``val`` split, validation runs on the training
    split.
    """
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    log = TrainingLog(out_dir / "training_log.jsonl")
    best_path = out_dir / "best.pt"
    last_path = out_dir / "last.pt"

    layout = DatasetLayout.open(cfg.data_root)
    train_ds = ChangePairDataset(layout, "train", seed=cfg.seed,
                                 augment_ops=cfg.augment_ops, train=True)
    val_split = "val" if ("val" in layout.splits and layout.splits["val"]) else "train"
    val_ds = ChangePairDataset(layout, val_split, seed=cfg.seed)

    torch.manual_seed(derive_seed(cfg.seed, "init"))
    model = DenseSwinNet(cfg.model)
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.lr,
                                 betas=(cfg.beta1, cfg.beta2))

    start_epoch, step, best_f1 = 0, 0, -1.0
    if resume is not None:
        model, payload = load_checkpoint(resume)
        state = payload["extra"].get("train_state")
        if state is None or state.get("version") != TRAIN_STATE_VERSION:
            raise CheckpointVersionError(
                f"checkpoint {resume} carries no resumable training state"
            )
        optimizer = torch.optim.Adam(model.parameters(), lr=cfg.lr,
                                     betas=(cfg.beta1, cfg.beta2))
        optimizer.load_state_dict(state["optimizer"])
        start_epoch = state["epoch"] + 1
        step = state["step"]
        best_f1 = state["best_f1"]

    workers = 0 if deterministic else cfg.workers
    epochs_run = 0
    for epoch in range(start_epoch, cfg.epochs):
        lr = lr_schedule(epoch, cfg)
        for group in optimizer.param_groups:
            group["lr"] = lr

        train_ds.set_epoch(epoch)
        order = _epoch_order(len(train_ds), cfg.seed, epoch)
        loader = DataLoader(train_ds, batch_size=cfg.batch_size,
                            sampler=order, num_workers=workers)
        model.train()
        step_losses = []
        term_sums: dict = {}
        for a, b, label in loader:
            gen = torch.Generator().manual_seed(
                derive_seed(cfg.seed, "dropout", step)
            )
            outputs = model(a, b, generator=gen)
            terms = total_loss(outputs, label, cfg.loss,
                               branch_mode=cfg.model.branch_mode)
            optimizer.zero_grad()
            terms.total.backward()
            optimizer.step()
            step_losses.append(float(terms.total))
            for key, value in terms.scalars().items():
                term_sums[key] = term_sums.get(key, 0.0) + value
            step += 1
            if max_steps is not None and step >= max_steps:
                break

        n_steps = max(len(step_losses), 1)
        _, val_report, _ = _evaluate_model(model, val_ds, cfg.threshold)
        row = {
            "epoch": epoch,
            "lr": lr,
            "loss": sum(step_losses) / n_steps,
            "step_losses": step_losses,
            "terms": {k: v / n_steps for k, v in term_sums.items()},
            "val_f1": val_report.f1,
            "val_iou": val_report.iou,
            "val_oa": val_report.oa,
        }
        log.append(row)
        epochs_run += 1

        if val_report.f1 > best_f1:
            best_f1 = val_report.f1
            save_checkpoint(best_path, model,
                            extra={"run_config": cfg.to_dict(),
                                   "epoch": epoch, "val_f1": best_f1})
        save_checkpoint(last_path, model, extra={
            "run_config": cfg.to_dict(),
            "train_state": {
                "version": TRAIN_STATE_VERSION,
                "optimizer": optimizer.state_dict(),
                "epoch": epoch,
                "step": step,
                "best_f1": best_f1,
            },
        })
        logger.info("epoch %d: loss %.4f, val F1 %.4f, lr %.2e",
                    epoch, row["loss"], val_report.f1, lr)
        if max_steps is not None and step >= max_steps:
            break

    return TrainResult(log_path=log.path, best_path=best_path,
                       last_path=last_path, best_f1=best_f1,
                       epochs_run=epochs_run)


def evaluate(ckpt_path, data_root, split: str, threshold: float = 0.5):
    """Load a checkpoint and score one dataset split.

    Returns (per_image, aggregate_report, aggregate_counts); the aggregate
    sums confusion counts over all images before computing metrics.
    """
    model, _ = load_checkpoint(ckpt_path)
    layout = DatasetLayout.open(data_root)
    dataset = ChangePairDataset(layout, split)
    if len(dataset) == 0:
        raise DatasetError(f"split {split!r} is empty")
    return _evaluate_model(model, dataset, threshold)


def predict(ckpt_path, a_path, b_path, label_path=None, out_dir=".",
            threshold: float = 0.5):
    """Predict one pair and write probability, mask and color PNGs."""
    model, _ = load_checkpoint(ckpt_path)
    model.eval()
    a_img = load_image(a_path)
    b_img = load_image(b_path)
    pair = BitemporalPair(a=a_img, b=b_img,
                          label=load_label(label_path) if label_path else None)
    a, b, _ = pair_to_tensors(pair)
    try:
        with torch.no_grad():
            out = model(a.unsqueeze(0), b.unsqueeze(0))
    except DimensionError as exc:
        raise DimensionError(
            f"{exc}; tile the inputs first (see the `tile` command)"
        ) from exc
    prob = out.cm[0, 0].numpy()
    mask = (prob >= threshold).astype(np.uint8)

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = Path(a_path).stem
    paths = {
        "probability": out_dir / f"{stem}_prob.png",
        "mask": out_dir / f"{stem}_mask.png",
    }
    prob8 = np.clip(np.round(prob * 255.0), 0, 255).astype(np.uint8)
    save_image(paths["probability"], np.repeat(prob8[..., None], 3, axis=-1))
    save_image(paths["mask"], np.repeat((mask * 255)[..., None], 3, axis=-1))
    if pair.label is not None:
        paths["colorized"] = out_dir / f"{stem}_color.png"
        save_image(paths["colorized"], colorize(mask, pair.label))
    return paths


def plot_log(log_path, out_dir):
    """Render loss and F1 curves from a training log to PNG files."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    log = TrainingLog.load(log_path)
    if not log.rows:
        raise DatasetError(f"training log {log_path} has no rows")
    epochs = [row["epoch"] for row in log.rows]
    losses = [row["loss"] for row in log.rows]
    f1s = [row["val_f1"] for row in log.rows]

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {}
    for key, values, title in (("loss", losses, "training loss"),
                               ("f1", f1s, "validation F1")):
        fig, ax = plt.subplots(figsize=(6, 4))
        ax.plot(epochs, values)
        ax.set_xlabel("epoch")
        ax.set_ylabel(title)
        ax.grid(True, alpha=0.3)
        fig.tight_layout()
        paths[key] = out_dir / f"{key}_curve.png"
        fig.savefig(paths[key], dpi=120)
        plt.close(fig)
    return paths
