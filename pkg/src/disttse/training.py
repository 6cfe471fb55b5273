"""Training loop: Adam, global-norm clipping, plateau LR decay, presence curriculum."""
from __future__ import annotations

import dataclasses
import json
import logging
import os
import random
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .dataset import DatasetSpec, ExampleGenerator
from .losses import DEFAULT, LossConfig, training_loss
from .model import DistanceTSE, ModelConfig

log = logging.getLogger(__name__)

CHECKPOINT_SCHEMA = 1
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 14
    lr0: float = 1e-3
    lr_decay_factor: float = 0.8
    patience_epochs: int = 14
    clip_norm: float = 5.0
    epochs: int = 500
    # ((first_epoch, last_epoch), presence_ratio), epochs counted from 1
    curriculum: list = field(default_factory=lambda: [((1, 250), 0.9), ((251, 500), 0.7)])
    seed: int = 0
    resume_from: str | None = None
    steps_per_epoch: int = 100
    val_examples: int = 64
    clip_len: float | None = None
    workers: int = 1

    def __post_init__(self):
        self.curriculum = [(tuple(r), float(p)) for r, p in self.curriculum]
        if self.batch_size < 1 or self.epochs < 1 or self.steps_per_epoch < 1:
            raise ValueError("batch_size, epochs and steps_per_epoch must be >= 1")
        if not 0 < self.lr_decay_factor <= 1 or self.lr0 <= 0 or self.clip_norm <= 0:
            raise ValueError("need lr0 > 0, 0 < lr_decay_factor <= 1, clip_norm > 0")
        for (lo, hi), p in self.curriculum:
            if lo > hi or not 0.0 <= p <= 1.0:
                raise ValueError(f"bad curriculum stage {((lo, hi), p)}")

    def presence_ratio(self, epoch: int) -> float:
        for (lo, hi), p in self.curriculum:
            if lo <= epoch <= hi:
                return p
        return self.curriculum[-1][1]

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["curriculum"] = [[list(r), p] for r, p in self.curriculum]
        return d


class PlateauDecay:
    """Multiply the LR by ``factor`` once ``patience`` epochs pass without a new best."""

    def __init__(self, optimizer, factor=0.8, patience=14):
        self.optimizer = optimizer
        self.factor = factor
        self.patience = patience
        self.best = float("inf")
        self.bad_epochs = 0

    @property
    def lr(self):
        return self.optimizer.param_groups[0]["lr"]

    def step(self, loss: float) -> bool:
        if loss < self.best:
            self.best = loss
            self.bad_epochs = 0
            return False
        self.bad_epochs += 1
        if self.bad_epochs >= self.patience:
            for g in self.optimizer.param_groups:
                g["lr"] *= self.factor
            self.bad_epochs = 0
            return True
        return False

    def state_dict(self):
        return {"best": self.best, "bad_epochs": self.bad_epochs}

    def load_state_dict(self, s):
        self.best, self.bad_epochs = s["best"], s["bad_epochs"]


def make_optimizer(model, lr):
    return torch.optim.Adam(model.parameters(), lr=lr, betas=ADAM_BETAS, eps=ADAM_EPS)


def collate(examples, dtype=torch.float32):
    y = torch.tensor(np.stack([e.mixture.samples for e in examples]), dtype=dtype)
    x = torch.tensor(np.stack([e.target.samples for e in examples]), dtype=dtype)
    d_q = torch.tensor([e.d_q for e in examples], dtype=dtype)
    presence = torch.tensor([e.presence for e in examples], dtype=torch.bool)
    return y, x, d_q, presence


def train_step(model, optimizer, batch, loss_cfg: LossConfig = DEFAULT, clip_norm=5.0,
               dump_dir=None):
    y, x, d_q, presence = batch
    model.train()
    x_hat = model(y, d_q)
    loss, per_row = training_loss(x, x_hat, y, presence, loss_cfg)
    if not torch.isfinite(loss):
        path = None
        if dump_dir is not None:
            path = Path(dump_dir) / "nonfinite_batch.npz"
            np.savez(path, y=y.numpy(), x=x.numpy(), d_q=d_q.numpy(), presence=presence.numpy(),
                     per_row=per_row.detach().numpy())
        raise FloatingPointError(
            f"non-finite training loss {loss.item()}; per-row losses "
            f"{per_row.detach().tolist()}, d_q {d_q.tolist()}; batch dumped to {path}")
    optimizer.zero_grad()
    loss.backward()
    torch.nn.utils.clip_grad_norm_(model.parameters(), clip_norm)
    optimizer.step()
    return loss.item()


@torch.no_grad()
def eval_loss(model, batch, loss_cfg: LossConfig = DEFAULT):
    y, x, d_q, presence = batch
    model.eval()
    return training_loss(x, model(y, d_q), y, presence, loss_cfg)[0].item()


# --- checkpoints ---------------------------------------------------------

def save_checkpoint(path, model, optimizer=None, scheduler=None, epoch=0, train_cfg=None,
                    extra=None):
    path = Path(path)
    state = {
        "schema_version": CHECKPOINT_SCHEMA,
        "model_config": model.cfg.to_dict() if hasattr(model.cfg, "to_dict") else None,
        "model_state": model.state_dict(),
        "optimizer_state": optimizer.state_dict() if optimizer else None,
        "optimizer": {"name": "adam", "betas": list(ADAM_BETAS), "eps": ADAM_EPS},
        "scheduler_state": scheduler.state_dict() if scheduler else None,
        "epoch": epoch,
        "train_config": train_cfg.to_dict() if train_cfg else None,
        "rng": {"torch": torch.get_rng_state(), "numpy": np.random.get_state(),
                "python": random.getstate()},
        "extra": extra or {},
    }
    tmp = path.with_name(path.name + ".tmp")
    torch.save(state, tmp)
    os.replace(tmp, path)


def load_checkpoint(path, expected: ModelConfig | None = None):
    state = torch.load(path, map_location="cpu", weights_only=False)
    if state.get("schema_version") != CHECKPOINT_SCHEMA:
        raise CheckpointError(f"{path}: unsupported checkpoint schema {state.get('schema_version')!r}")
    cfg = ModelConfig.from_dict(state["model_config"])
    if expected is not None and cfg.to_dict() != expected.to_dict():
        diff = {k: (v, expected.to_dict()[k]) for k, v in cfg.to_dict().items()
                if expected.to_dict()[k] != v}
        raise CheckpointError(f"{path}: model config mismatch (checkpoint vs expected): {diff}")
    return state, cfg


def load_model(path, expected: ModelConfig | None = None) -> DistanceTSE:
    state, cfg = load_checkpoint(path, expected)
    model = DistanceTSE(cfg)
    model.load_state_dict(state["model_state"])
    model.eval()
    return model


# --- main loop -----------------------------------------------------------

def _examples(gen, split, indices, ratio, rep=0):
    return [gen.example(split, i, presence_ratio=ratio, rep=rep) for i in indices]


def train(model_cfg: ModelConfig, data_spec: DatasetSpec, train_cfg: TrainConfig, corpus, out_dir,
          *, init_state=None, loss_cfg: LossConfig = DEFAULT, store=None):
    """Run the epoch loop; returns the list of per-epoch log records.

    Writes ``epoch_XXXX.pt`` and ``last.pt`` every epoch, ``best.pt`` on each
    new best validation loss, and appends one JSON line per epoch to
    ``train_log.jsonl``.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if train_cfg.clip_len is not None:
        data_spec = dataclasses.replace(data_spec, clip_len=train_cfg.clip_len)
    # denormals in the recurrent state slow CPU steps roughly 2x
    torch.set_flush_denormal(True)
    torch.manual_seed(train_cfg.seed)
    np.random.seed(train_cfg.seed)
    random.seed(train_cfg.seed)
    model = DistanceTSE(model_cfg)
    if init_state is not None:
        model.load_state_dict(init_state)
    optimizer = make_optimizer(model, train_cfg.lr0)
    scheduler = PlateauDecay(optimizer, train_cfg.lr_decay_factor, train_cfg.patience_epochs)
    start_epoch = 1
    if train_cfg.resume_from:
        state, _ = load_checkpoint(train_cfg.resume_from, model_cfg)
        model.load_state_dict(state["model_state"])
        optimizer.load_state_dict(state["optimizer_state"])
        scheduler.load_state_dict(state["scheduler_state"])
        torch.set_rng_state(state["rng"]["torch"])
        np.random.set_state(state["rng"]["numpy"])
        random.setstate(state["rng"]["python"])
        start_epoch = state["epoch"] + 1

    gen = ExampleGenerator(data_spec, corpus, store)
    train_seed_spec = dataclasses.replace(data_spec, seed=data_spec.seed * 1000003 + train_cfg.seed)
    train_gen = ExampleGenerator(train_seed_spec, corpus, store)
    val_batch = None
    try:
        val = _examples(gen, "valid", range(train_cfg.val_examples), train_cfg.curriculum[0][1])
        val_batch = collate(val) if val else None
    except ValueError as err:
        log.warning("no validation split (%s); LR schedule follows the training loss", err)

    per_epoch = train_cfg.steps_per_epoch * train_cfg.batch_size
    log_path = out_dir / "train_log.jsonl"
    history = []
    for epoch in range(start_epoch, train_cfg.epochs + 1):
        ratio = train_cfg.presence_ratio(epoch)
        losses = []
        for step in range(train_cfg.steps_per_epoch):
            base = (epoch - 1) * per_epoch + step * train_cfg.batch_size
            batch = collate(_examples(train_gen, "train", range(base, base + train_cfg.batch_size), ratio))
            losses.append(train_step(model, optimizer, batch, loss_cfg, train_cfg.clip_norm, out_dir))
        train_loss = float(np.mean(losses))
        val_loss = eval_loss(model, val_batch, loss_cfg) if val_batch is not None else None
        lr_used = scheduler.lr
        monitored = val_loss if val_loss is not None else train_loss
        improved = monitored < scheduler.best
        scheduler.step(monitored)
        rec = {"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss, "lr": lr_used,
               "presence_ratio": ratio}
        history.append(rec)
        with open(log_path, "a") as f:
            f.write(json.dumps(rec) + "\n")
        ck = dict(model=model, optimizer=optimizer, scheduler=scheduler, epoch=epoch,
                  train_cfg=train_cfg, extra={"dataset": data_spec.to_dict(), "log": rec})
        save_checkpoint(out_dir / f"epoch_{epoch:04d}.pt", **ck)
        save_checkpoint(out_dir / "last.pt", **ck)
        if improved:
            save_checkpoint(out_dir / "best.pt", **ck)
        log.info("epoch %d train %.3f val %s lr %.2e", epoch, train_loss, val_loss, lr_used)
    return history


def finetune(checkpoint, d4_spec: DatasetSpec, train_cfg: TrainConfig, corpus, out_dir,
             model_cfg: ModelConfig | None = None, **kw):
    """Continue training a pre-trained model on real-RIR data (r_spk 0.1 m by default for D4)."""
    state, cfg = load_checkpoint(checkpoint, model_cfg)
    return train(cfg, d4_spec, train_cfg, corpus, out_dir, init_state=state["model_state"], **kw)
