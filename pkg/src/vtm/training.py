"""AdamW training with a cosine schedule, and evaluation."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .data import Split, SyntheticDataset
from .network import NetworkConfig, NetworkParams, forward_batch, init_params, pad_frames

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainHyper:
    lr: float = 1e-3
    epochs: int = 70
    batch: int = 8
    seed: int = 0
    weight_decay: float = 0.01
    warmup_fraction: float = 1.0 / 7.0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8


class AdamW:
    def __init__(self, params: dict[str, ad.Node], lr: float, weight_decay: float, betas=(0.9, 0.999), eps=1e-8):
        self.params = params
        self.lr = lr
        self.weight_decay = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = {k: np.zeros_like(p.value) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.value) for k, p in params.items()}
        self.t = {k: 0 for k in params}

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                # parameter not reachable from the loss: leave it untouched
                continue
            self.t[k] += 1
            t = self.t[k]
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            m_hat = self.m[k] / (1 - self.b1**t)
            v_hat = self.v[k] / (1 - self.b2**t)
            decay = self.weight_decay if p.value.ndim >= 2 else 0.0
            update = m_hat / (np.sqrt(v_hat) + self.eps) + decay * p.value
            p.value = (p.value - lr * update).astype(p.value.dtype)


def cosine_lr(step: int, total: int, base: float, warmup: int) -> float:
    if warmup and step < warmup:
        return base * (step + 1) / warmup
    progress = (step - warmup) / max(1, total - warmup)
    return 0.5 * base * (1.0 + math.cos(math.pi * min(1.0, progress)))


def task_loss(pred: ad.Node, targets: np.ndarray, cfg: NetworkConfig) -> ad.Node:
    if cfg.head_type == "classify":
        return ad.cross_entropy(pred, targets)
    return ad.mse(pred, targets)


def _as_split(data) -> Split:
    return data.train if isinstance(data, SyntheticDataset) else data


def train(data, cfg: NetworkConfig, hyper: TrainHyper = TrainHyper(), val: Split | None = None,
          params: NetworkParams | None = None) -> tuple[NetworkParams, list[dict]]:
    """Minimise main loss + aux_loss_weight * auxiliary loss.

    ``data`` is a :class:`Split` or a :class:`SyntheticDataset` (whose val split
    is then used for per-epoch metrics).
    """
    if isinstance(data, SyntheticDataset) and val is None:
        val = data.val
    split = _as_split(data)
    if len(split) == 0:
        raise ValueError("empty training set")
    params = params or init_params(cfg, seed=hyper.seed)
    named = params.named()
    opt = AdamW(named, hyper.lr, hyper.weight_decay, hyper.betas, hyper.eps)
    rng = np.random.default_rng(hyper.seed)
    steps_per_epoch = math.ceil(len(split) / hyper.batch)
    total = steps_per_epoch * hyper.epochs
    warmup = int(round(hyper.warmup_fraction * total))
    history = []
    step = 0
    for epoch in range(hyper.epochs):
        order = rng.permutation(len(split))
        losses, correct = [], 0
        for start in range(0, len(split), hyper.batch):
            idx = np.sort(order[start:start + hyper.batch])
            motion = None if split.motion is None else split.motion[idx]
            res = forward_batch(split.features[idx], cfg, params, "train", motion, rng=rng)
            loss = task_loss(res.prediction, split.labels[idx], cfg)
            if res.aux_prediction is not None and cfg.aux_loss_weight > 0:
                loss = loss + ad.scale(task_loss(res.aux_prediction, split.labels[idx], cfg), cfg.aux_loss_weight)
            value = float(loss.value)
            if not math.isfinite(value):
                raise DivergenceError(f"loss became {value} at epoch {epoch}, step {step}")
            for p in named.values():
                p.grad = None
            ad.backward(loss)
            opt.step(cosine_lr(step, total, hyper.lr, warmup))
            step += 1
            losses.append(value)
            if cfg.head_type == "classify":
                correct += int(np.sum(res.prediction.value.argmax(axis=1) == split.labels[idx]))
        row = {"epoch": epoch, "loss": float(np.mean(losses))}
        if cfg.head_type == "classify":
            row["train_accuracy"] = correct / len(split)
        if val is not None and len(val):
            metrics = evaluate(val, params, cfg, seed=hyper.seed, batch=hyper.batch)
            row.update({f"val_{k}": v for k, v in metrics.items() if k != "token_trace"})
        history.append(row)
        log.info("epoch %d %s", epoch, row)
    return params, history


def evaluate(data, params: NetworkParams, cfg: NetworkConfig, seed=0, batch: int = 8) -> dict:
    """Eval-mode metrics: accuracy (classify) or mse (regress), saliency contrast, token trace."""
    split = _as_split(data)
    rng = np.random.default_rng(seed)
    preds, sal_sig, sal_bg = [], [], []
    trace = None
    with ad.no_grad():
        for start in range(0, len(split), batch):
            idx = np.arange(start, min(len(split), start + batch))
            motion = None if split.motion is None else split.motion[idx]
            res = forward_batch(split.features[idx], cfg, params, "eval", motion, rng=rng)
            preds.append(res.prediction.value)
            if trace is None:
                trace = [(t.chunk_sizes_in[0], t.chunk_sizes_out[0]) for t in res.traces]
            sal = res.traces[0].saliency
            if sal is not None:
                masks = split.masks[idx]
                L_pad = cfg.padded_length(masks.shape[1])
                masks, _ = pad_frames(masks[..., None], None, L_pad)
                m = masks.reshape(-1)
                sal_sig.append(sal[m])
                sal_bg.append(sal[~m])
    pred = np.concatenate(preds)
    out = {}
    if cfg.head_type == "classify":
        out["accuracy"] = float(np.mean(pred.argmax(axis=1) == split.labels))
    else:
        out["mse"] = float(np.mean((pred[:, 0] - split.labels) ** 2))
    if sal_sig:
        sig, bg = np.concatenate(sal_sig), np.concatenate(sal_bg)
        out["saliency_signal"] = float(sig.mean()) if sig.size else float("nan")
        out["saliency_background"] = float(bg.mean()) if bg.size else float("nan")
    out["token_trace"] = trace
    return out


def hyper_dict(h: TrainHyper) -> dict:
    d = asdict(h)
    d["betas"] = list(h.betas)
    return d
