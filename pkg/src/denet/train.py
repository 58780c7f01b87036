"""SGD training with a warmed-up polynomial learning-rate schedule, plus evaluation."""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from denet import ops
from denet.checkpoint import load_model, save_model
from denet.data import Example, load_dataset, read_pgm_bytes, write_pgm
from denet.losses import LossWeights, loss_terms
from denet.metrics import MetricsReport, evaluate_masks, miou, roc_sweep
from denet.network import DENet, NetworkConfig, build_model
from denet.tensor import Tensor, no_grad

LOG_HEADER = ("epoch", "lr", "edge_loss", "mask_loss", "total_loss", "val_miou")
BEST_CKPT = "best.ckpt"
LAST_CKPT = "last.ckpt"
LOG_FILE = "train_log.csv"


class NonFiniteGradient(FloatingPointError):
    pass


@dataclass
class OptimConfig:
    lr0: float = 0.01
    weight_decay: float = 5e-4
    lr_min: float = 1e-5
    warmup_epochs: int = 5
    total_epochs: int = 50
    poly_power: float = 0.9
    batch_size: int = 4
    momentum: float = 0.0
    eval_every: int = 1
    val_fraction: float = 0.1

    def __post_init__(self):
        if not self.lr_min < self.lr0:
            raise ValueError("lr_min must be below lr0")
        if not 0 <= self.warmup_epochs < self.total_epochs:
            raise ValueError("warmup_epochs must be in [0, total_epochs)")
        if self.batch_size < 1 or self.eval_every < 1:
            raise ValueError("batch_size and eval_every must be positive")
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError("val_fraction must be in (0, 1)")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")


@dataclass
class RunConfig:
    network: NetworkConfig = field(default_factory=NetworkConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    data_dir: Optional[str] = None
    out_dir: Optional[str] = None
    seed: int = 0

    def to_dict(self) -> dict:
        return {"network": self.network.to_dict(), "optim": asdict(self.optim),
                "loss": asdict(self.loss), "seed": self.seed}


CONFIG_KEYS = ("network", "optim", "loss", "seed")


def _strict(cls, d: dict, section: str):
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ValueError(f"unknown {section} keys: {sorted(unknown)}")
    return cls(**d)


def run_config_from_dict(d: dict) -> RunConfig:
    unknown = set(d) - set(CONFIG_KEYS)
    if unknown:
        raise ValueError(f"unknown top-level config keys: {sorted(unknown)}")
    return RunConfig(network=NetworkConfig.from_dict(d.get("network", {})),
                     optim=_strict(OptimConfig, d.get("optim", {}), "optim"),
                     loss=_strict(LossWeights, d.get("loss", {}), "loss"),
                     seed=int(d.get("seed", 0)))


def load_run_config(path) -> RunConfig:
    with open(path) as fh:
        return run_config_from_dict(json.load(fh))


def poly_lr(epoch: int, cfg: OptimConfig) -> float:
    if not 0 <= epoch < cfg.total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.total_epochs})")
    if epoch < cfg.warmup_epochs:
        return cfg.lr0 * (epoch + 1) / cfg.warmup_epochs
    t = epoch - cfg.warmup_epochs
    span = cfg.total_epochs - cfg.warmup_epochs
    return cfg.lr_min + (cfg.lr0 - cfg.lr_min) * (1.0 - t / span) ** cfg.poly_power


def sgd_step(params: dict[str, Tensor], lr: float, weight_decay: float, momentum: float = 0.0,
             velocity: Optional[dict[str, np.ndarray]] = None) -> None:
    """In place ``p <- p - lr * (g + wd * p)``; with momentum the bracket feeds a velocity buffer.

    Every gradient is checked before anything is touched, so a non-finite
    gradient leaves all parameters unchanged.
    """
    for name, p in params.items():
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise NonFiniteGradient(f"non-finite gradient in tensor {name!r}")
    for name, p in params.items():
        if p.grad is None:
            continue
        step = p.grad + weight_decay * p.data
        if momentum:
            if velocity is None:
                raise ValueError("momentum needs a velocity buffer")
            v = velocity.get(name)
            step = step if v is None else momentum * v + step
            velocity[name] = step
        p.data = (p.data - lr * step).astype(p.data.dtype, copy=False)


def split_indices(n: int, val_fraction: float) -> tuple[list[int], list[int]]:
    """Train on the head of the manifest, validate on its last ``ceil(n * val_fraction)`` rows."""
    if n == 0:
        raise ValueError("empty dataset")
    if n == 1:
        return [0], [0]
    n_val = min(max(1, math.ceil(n * val_fraction - 1e-9)), n - 1)
    return list(range(n - n_val)), list(range(n - n_val, n))


def _stack(examples: Sequence[Example], attr: str, dtype) -> np.ndarray:
    return np.stack([getattr(e, attr) for e in examples]).astype(dtype)


def predict_probs(model: DENet, images: np.ndarray, batch_size: int = 8) -> np.ndarray:
    """Sigmoid mask probabilities for an ``N x 1 x H x W`` stack."""
    out = []
    with no_grad():
        for i in range(0, len(images), batch_size):
            logits = model(Tensor(images[i:i + batch_size]))["mask_logits"]
            out.append(ops._sigmoid(logits.data.astype(np.float64)))
    return np.concatenate(out) if out else np.zeros((0,) + images.shape[1:])


def binarize(probs: np.ndarray, threshold: float) -> np.ndarray:
    return (probs > threshold).astype(np.uint8)


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    edge_loss: float
    mask_loss: float
    total_loss: float
    val_miou: float
    val_loss: float = math.nan


@dataclass
class TrainResult:
    history: list[EpochRecord]
    best_miou: float
    best_epoch: int
    model: DENet
    out_dir: Optional[Path] = None
    seconds: float = 0.0


def _batch_loss(model: DENet, batch: Sequence[Example], weights: LossWeights, dtype):
    out = model(Tensor(_stack(batch, "image", dtype)))
    edge_p = ops.sigmoid(out["edge_logits"])
    mask_p = ops.sigmoid(out["mask_logits"])
    return loss_terms(edge_p, _stack(batch, "edge", dtype), mask_p, _stack(batch, "mask", dtype), weights)


def validate(model: DENet, examples: Sequence[Example], weights: LossWeights,
             batch_size: int, threshold: float = 0.5) -> tuple[float, float]:
    """(mIoU, mean total loss) on ``examples``."""
    dtype = model.config.np_dtype
    losses, preds = [], []
    with no_grad():
        for i in range(0, len(examples), batch_size):
            batch = examples[i:i + batch_size]
            out = model(Tensor(_stack(batch, "image", dtype)))
            edge_p = ops.sigmoid(out["edge_logits"])
            mask_p = ops.sigmoid(out["mask_logits"])
            total, _, _ = loss_terms(edge_p, _stack(batch, "edge", dtype), mask_p,
                                     _stack(batch, "mask", dtype), weights)
            losses.append(total.item() * len(batch))
            preds.extend(binarize(mask_p.data, threshold))
    return miou(preds, [e.mask for e in examples]), float(np.sum(losses) / len(examples))


def write_model_config(ckpt_path, cfg: NetworkConfig) -> None:
    Path(str(ckpt_path) + ".json").write_text(json.dumps(cfg.to_dict(), indent=2) + "\n")


def load_trained(ckpt_path) -> DENet:
    """Rebuild the network from the checkpoint's config sidecar and load its weights."""
    side = Path(str(ckpt_path) + ".json")
    if not side.exists():
        raise FileNotFoundError(f"missing model config {side}")
    cfg = NetworkConfig.from_dict(json.loads(side.read_text()))
    return load_model(ckpt_path, build_model(cfg))


def _save(model: DENet, path: Path) -> None:
    try:
        save_model(path, model)
        write_model_config(path, model.config)
    except OSError as exc:
        raise OSError(f"failed to write checkpoint {path}: {exc}") from exc


def train(run: RunConfig, examples: Optional[Sequence[Example]] = None,
          log: Optional[Callable[[str], None]] = None) -> TrainResult:
    """Seeded mini-batch SGD. The top-level seed drives both initialisation and shuffling.

    Writes ``train_log.csv``, ``best.ckpt`` (by validation mIoU) and
    ``last.ckpt`` into ``run.out_dir`` when it is set.
    """
    start = time.perf_counter()
    if examples is None:
        if run.data_dir is None:
            raise ValueError("no data_dir and no examples given")
        if not Path(run.data_dir).is_dir():
            raise FileNotFoundError(f"data directory {run.data_dir} does not exist")
        examples = load_dataset(run.data_dir)
    examples = list(examples)
    train_idx, val_idx = split_indices(len(examples), run.optim.val_fraction)
    train_set = [examples[i] for i in train_idx]
    val_set = [examples[i] for i in val_idx]

    model = build_model(replace(run.network, seed=run.seed))
    dtype = model.config.np_dtype
    params = model.parameters()
    velocity: dict[str, np.ndarray] = {}
    rng = np.random.default_rng(run.seed)
    opt = run.optim

    out_dir = Path(run.out_dir) if run.out_dir else None
    writer = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        log_fh = open(out_dir / LOG_FILE, "w", newline="")
        writer = csv.writer(log_fh)
        writer.writerow(LOG_HEADER)

    history: list[EpochRecord] = []
    best, best_epoch = -math.inf, -1
    try:
        for epoch in range(opt.total_epochs):
            lr = poly_lr(epoch, opt)
            order = rng.permutation(len(train_set))
            sums = np.zeros(3)
            for i in range(0, len(order), opt.batch_size):
                batch = [train_set[j] for j in order[i:i + opt.batch_size]]
                model.zero_grad()
                total, edge, mask = _batch_loss(model, batch, run.loss, dtype)
                total.backward()
                sgd_step(params, lr, opt.weight_decay, opt.momentum, velocity)
                sums += np.array([edge.item(), mask.item(), total.item()]) * len(batch)
            edge_l, mask_l, total_l = sums / len(train_set)
            val_miou = val_loss = math.nan
            if (epoch + 1) % opt.eval_every == 0 or epoch == opt.total_epochs - 1:
                val_miou, val_loss = validate(model, val_set, run.loss, opt.batch_size)
                if val_miou > best:
                    best, best_epoch = val_miou, epoch
                    if out_dir is not None:
                        _save(model, out_dir / BEST_CKPT)
            rec = EpochRecord(epoch, lr, edge_l, mask_l, total_l, val_miou, val_loss)
            history.append(rec)
            if writer is not None:
                writer.writerow([epoch, f"{lr:.8g}", f"{edge_l:.8f}", f"{mask_l:.8f}", f"{total_l:.8f}",
                                 "" if math.isnan(val_miou) else f"{val_miou:.6f}"])
                log_fh.flush()
            if log is not None:
                log(f"epoch {epoch:3d} lr {lr:.5f} edge {edge_l:.4f} mask {mask_l:.4f} "
                    f"total {total_l:.4f} val_miou {val_miou:.4f}")
    finally:
        if writer is not None:
            log_fh.close()
    if out_dir is not None:
        _save(model, out_dir / LAST_CKPT)
    return TrainResult(history, best, best_epoch, model, out_dir, time.perf_counter() - start)


def evaluate(ckpt, data_dir, threshold: float = 0.5, oracle: bool = False,
             n_thresholds: int = 21, report_path=None) -> MetricsReport:
    """Metrics for a checkpoint over every manifest sample.

    ``oracle`` skips the model and scores the ground-truth masks against
    themselves. Predictions are ``prob > threshold``.
    """
    examples = load_dataset(data_dir)
    if not examples:
        raise ValueError(f"{data_dir}: empty dataset")
    gts = [e.mask for e in examples]
    if oracle:
        probs = [g.astype(np.float64) for g in gts]
    else:
        model = load_trained(ckpt)
        probs = list(predict_probs(model, _stack(examples, "image", model.config.np_dtype)))
    preds = [binarize(p, threshold) for p in probs]
    report = evaluate_masks(preds, gts, probs, n_thresholds)
    if report_path is not None:
        Path(report_path).write_text(report.to_text())
    return report


def roc(ckpt, data_dir, points: int, out_csv=None) -> list[tuple[float, float, float]]:
    examples = load_dataset(data_dir)
    model = load_trained(ckpt)
    probs = list(predict_probs(model, _stack(examples, "image", model.config.np_dtype)))
    curve = roc_sweep(probs, [e.mask for e in examples], points)
    if out_csv is not None:
        with open(out_csv, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(("threshold", "fpr", "tpr"))
            w.writerows(curve)
    return curve


def infer(ckpt, image_path, out_path, threshold: float = 0.5) -> np.ndarray:
    """Predicted binary mask for one PGM, written as a 0/255 PGM."""
    model = load_trained(ckpt)
    image = read_pgm_bytes(image_path)[None, None] / 255.0
    mask = binarize(predict_probs(model, image.astype(model.config.np_dtype))[0], threshold)
    write_pgm(out_path, mask)
    return mask


def read_log(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))

