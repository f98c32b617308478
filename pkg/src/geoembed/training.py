"""Relative-error loss, the AdamW / polynomial-decay training loop and finetuning."""

from __future__ import annotations

import copy
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch

from .checkpoint import (
    load_model_arrays, load_optimizer_arrays, model_arrays, optimizer_arrays_and_meta,
    read_checkpoint, write_checkpoint,
)
from .errors import NumericError
from .mesh import TriangleMesh
from .network import GeodesicEmbeddingNet, HierarchyBatch, ModelConfig, collate, prepare_mesh
from .oracle import GeodesicSampleSet

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    """Optimization settings. Defaults suit a single desk machine; large-corpus
    training uses e.g. ``batch_size_meshes=40``, ``epochs=500`` and
    ``pairs_per_mesh=100_000``."""

    learning_rate: float = 0.0025
    weight_decay: float = 0.01
    batch_size_meshes: int = 4
    epochs: int = 100
    poly_power: float = 0.9
    pairs_per_mesh: int = 4096
    epsilon: float = 1e-3
    seed: int = 0
    val_fraction: float = 0.1
    eval_every: int = 1
    checkpoint_every: int = 0
    checkpoint_dir: Optional[str] = None
    log_path: Optional[str] = None

    def __post_init__(self):
        for name in ("learning_rate", "batch_size_meshes", "pairs_per_mesh", "epsilon"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.weight_decay < 0 or self.epochs < 0:
            raise ValueError("weight_decay and epochs must be non-negative")
        if not 0 < self.poly_power <= 2:
            raise ValueError("poly_power must lie in (0, 2]")
        if not 0 <= self.val_fraction < 1:
            raise ValueError("val_fraction must lie in [0, 1)")

    @classmethod
    def field_names(cls):
        return {f.name for f in fields(cls)}


def mre_loss(predicted, ground_truth, epsilon=1e-3):
    """Mean of ``|pred - gt| / (gt + epsilon)``.

    Works on torch tensors (differentiable) or array-likes (returns a float).
    """
    if torch.is_tensor(predicted):
        if predicted.numel() == 0:
            raise ValueError("empty batch")
        gt = torch.as_tensor(ground_truth, dtype=predicted.dtype)
        return ((predicted - gt).abs() / (gt + epsilon)).mean()
    p = np.asarray(predicted, dtype=np.float64)
    g = np.asarray(ground_truth, dtype=np.float64)
    if p.size == 0:
        raise ValueError("empty batch")
    return float(np.mean(np.abs(p - g) / (g + epsilon)))


def poly_lr(step, total_steps, base_lr, power=0.9):
    """``base_lr * (1 - step / total_steps) ** power``; zero once the schedule ends."""
    if total_steps <= 0:
        return base_lr
    frac = min(step / total_steps, 1.0)
    return base_lr * (1.0 - frac) ** power


@dataclass(eq=False)
class MeshItem:
    mesh: TriangleMesh
    samples: GeodesicSampleSet
    batch: HierarchyBatch
    i: torch.Tensor
    j: torch.Tensor
    d: torch.Tensor


def _prepare(mesh, samples, model_config):
    samples.check_mesh(mesh)
    if len(samples) == 0:
        raise ValueError("sample set is empty")
    return MeshItem(mesh, samples, prepare_mesh(mesh, model_config),
                    torch.from_numpy(samples.i), torch.from_numpy(samples.j),
                    torch.from_numpy(samples.d.astype(np.float32)))


@dataclass(eq=False)
class TrainState:
    model: GeodesicEmbeddingNet
    optimizer: torch.optim.Optimizer
    config: TrainConfig
    step: int = 0
    epoch: int = 0
    rng: np.random.Generator = None
    best_val_mre: float = math.inf
    history: List[dict] = field(default_factory=list)
    torch_rng: Optional[np.ndarray] = None

    @property
    def params(self):
        return self.model

    def save(self, path):
        """Write a checkpoint with model, optimizer and RNG state."""
        arrays = model_arrays(self.model)
        opt_arrays, opt_meta = optimizer_arrays_and_meta(self.optimizer)
        arrays.update(opt_arrays)
        # a loaded state keeps the generator snapshot it was saved with, so
        # save -> load -> save is byte-identical
        arrays["rng.torch"] = self.torch_rng if self.torch_rng is not None else torch.get_rng_state().numpy()
        meta = {
            "model_config": self.model.config.to_dict(),
            "train_config": asdict(self.config),
            "optimizer": opt_meta,
            "step": self.step,
            "epoch": self.epoch,
            "best_val_mre": None if math.isinf(self.best_val_mre) else self.best_val_mre,
            "numpy_rng": self.rng.bit_generator.state if self.rng is not None else None,
        }
        write_checkpoint(path, arrays, meta)

    @classmethod
    def load(cls, path, restore_torch_rng=False):
        arrays, meta = read_checkpoint(path)
        model = GeodesicEmbeddingNet(ModelConfig.from_dict(meta["model_config"]))
        load_model_arrays(model, arrays)
        config = TrainConfig(**meta["train_config"])
        optimizer = make_optimizer(model, config)
        load_optimizer_arrays(optimizer, arrays, meta["optimizer"])
        rng = None
        if meta.get("numpy_rng") is not None:
            rng = np.random.default_rng()
            rng.bit_generator.state = meta["numpy_rng"]
        if restore_torch_rng and "rng.torch" in arrays:
            torch.set_rng_state(torch.from_numpy(arrays["rng.torch"]))
        best = meta.get("best_val_mre")
        return cls(model, optimizer, config, meta["step"], meta["epoch"], rng,
                   math.inf if best is None else best, torch_rng=arrays.get("rng.torch"))


def make_optimizer(model, config: TrainConfig):
    return torch.optim.AdamW(model.parameters(), lr=config.learning_rate,
                             weight_decay=config.weight_decay)


def init_state(config: TrainConfig, model_config: ModelConfig = None) -> TrainState:
    torch.manual_seed(config.seed)
    model = GeodesicEmbeddingNet(model_config or ModelConfig())
    return TrainState(model, make_optimizer(model, config), config, rng=np.random.default_rng(config.seed))


def _pair_batch(items: Sequence[MeshItem], rng, n):
    """Collate meshes and draw ``n`` labelled pairs from each."""
    hb = collate([it.batch for it in items])
    gi, gj, gd = [], [], []
    for k, it in enumerate(items):
        m = len(it.d)
        sel = torch.from_numpy(rng.choice(m, size=n, replace=n > m))
        off = int(hb.offsets[k])
        gi.append(it.i[sel] + off)
        gj.append(it.j[sel] + off)
        gd.append(it.d[sel])
    return hb, torch.cat(gi), torch.cat(gj), torch.cat(gd)


def _batch_loss(model, hb, i, j, d, eps):
    emb = model.embed(hb)
    pred = model.decode(emb[i], emb[j])
    # every mesh contributes the same number of pairs, so the pooled mean
    # equals the mean of the per-mesh losses
    return mre_loss(pred, d, eps)


def sample_set_mre(model, item_or_mesh, samples=None, model_config=None, max_pairs=None, epsilon=1e-3):
    """MRE of the model's raw-clamped predictions on stored sample pairs."""
    if isinstance(item_or_mesh, MeshItem):
        item = item_or_mesh
    else:
        item = _prepare(item_or_mesh, samples, model_config or model.config)
    was = model.training
    model.eval()
    with torch.no_grad():
        emb = model.embed(item.batch)
        i, j, d = item.i, item.j, item.d
        if max_pairs is not None and len(d) > max_pairs:
            i, j, d = i[:max_pairs], j[:max_pairs], d[:max_pairs]
        pred = model.decode(emb[i], emb[j]).clamp(min=0)
        val = float(mre_loss(pred.double(), d.double(), epsilon))
    model.train(was)
    return val


class _Logger:
    def __init__(self, path):
        self.fh = open(path, "a") if path else None

    def write(self, record):
        if self.fh:
            self.fh.write(json.dumps(record) + "\n")
            self.fh.flush()

    def close(self):
        if self.fh:
            self.fh.close()


def _optimize(state: TrainState, items: List[MeshItem], val_items: List[MeshItem], total_steps: int,
              num_steps: int, base_lr: float, batch_size: int, pairs: int, steps_per_epoch: int,
              log: _Logger, callback=None, count_epochs=True):
    cfg = state.config
    start_step = state.step
    model = state.model
    model.train()
    t0 = time.perf_counter()
    order = []
    epoch_losses = []
    best_params = None
    for _ in range(num_steps):
        if not order:
            perm = state.rng.permutation(len(items)).tolist()
            order = [perm[k:k + batch_size] for k in range(0, len(perm), batch_size)]
        group = order.pop(0)
        hb, i, j, d = _pair_batch([items[k] for k in group], state.rng, pairs)
        lr = poly_lr(state.step - start_step, total_steps, base_lr, cfg.poly_power)
        for g in state.optimizer.param_groups:
            g["lr"] = lr
        loss = _batch_loss(model, hb, i, j, d, cfg.epsilon)
        if not torch.isfinite(loss):
            if cfg.checkpoint_dir:
                Path(cfg.checkpoint_dir).mkdir(parents=True, exist_ok=True)
                state.save(Path(cfg.checkpoint_dir) / "diagnostic.gckp")
            raise NumericError(f"non-finite loss at step {state.step}", stage="train")
        state.optimizer.zero_grad(set_to_none=True)
        loss.backward()
        state.optimizer.step()
        state.step += 1
        lv = loss.item()
        epoch_losses.append(lv)
        rec = {"step": state.step, "lr": lr, "loss": lv, "wall_time": time.perf_counter() - t0}
        state.history.append(rec)
        log.write(rec)
        if callback is not None:
            callback(rec)
        if count_epochs and not order and len(epoch_losses) >= steps_per_epoch:
            state.epoch += 1
            erec = {"epoch": state.epoch, "step": state.step, "train_mre": float(np.mean(epoch_losses))}
            epoch_losses = []
            if val_items and cfg.eval_every and state.epoch % cfg.eval_every == 0:
                v = float(np.mean([sample_set_mre(model, it, epsilon=cfg.epsilon) for it in val_items]))
                erec["val_mre"] = v
                if v < state.best_val_mre:
                    state.best_val_mre = v
                    best_params = copy.deepcopy(model.state_dict())
            log.write(erec)
            logger.info("epoch %d: %s", state.epoch, erec)
            if cfg.checkpoint_dir and cfg.checkpoint_every and state.epoch % cfg.checkpoint_every == 0:
                Path(cfg.checkpoint_dir).mkdir(parents=True, exist_ok=True)
                state.save(Path(cfg.checkpoint_dir) / f"epoch{state.epoch:05d}.gckp")
    return best_params


def split_validation(n, fraction, rng):
    n_val = int(math.floor(n * fraction))
    if n_val == 0 or n_val >= n:
        return list(range(n)), []
    perm = rng.permutation(n)
    return sorted(perm[n_val:].tolist()), sorted(perm[:n_val].tolist())


def train(meshes: Sequence[Tuple[TriangleMesh, GeodesicSampleSet]], config: TrainConfig,
          model_config: ModelConfig = None, state: TrainState = None, callback=None) -> TrainState:
    """Train on (mesh, sample set) pairs.

    Each step draws ``batch_size_meshes`` meshes (one pass over the training
    meshes per epoch) and ``pairs_per_mesh`` labelled pairs per mesh. The
    learning rate decays polynomially to zero over all steps. When a
    validation split exists, the returned parameters are the ones with the
    best validation MRE.
    """
    if state is None:
        state = init_state(config, model_config)
    model_config = state.model.config
    items = [_prepare(m, s, model_config) for m, s in meshes]
    if not items and config.epochs > 0:
        raise ValueError("no training meshes")
    split_rng = np.random.default_rng(config.seed + 1)
    tr, va = split_validation(len(items), config.val_fraction, split_rng)
    train_items = [items[k] for k in tr]
    val_items = [items[k] for k in va]
    batch = min(config.batch_size_meshes, max(len(train_items), 1))
    steps_per_epoch = math.ceil(len(train_items) / batch) if train_items else 0
    total = steps_per_epoch * config.epochs
    log = _Logger(config.log_path)
    try:
        best = _optimize(state, train_items, val_items, total, total, config.learning_rate,
                         batch, config.pairs_per_mesh, steps_per_epoch, log, callback)
    finally:
        log.close()
    if best is not None:
        state.model.load_state_dict(best)
    if config.checkpoint_dir:
        Path(config.checkpoint_dir).mkdir(parents=True, exist_ok=True)
        state.save(Path(config.checkpoint_dir) / "last.gckp")
    return state


def train_biharmonic(meshes, config: TrainConfig, model_config: ModelConfig = None, **kw) -> TrainState:
    """Same loop as :func:`train`; the sample sets carry biharmonic labels."""
    return train(meshes, config, model_config, **kw)


def finetune(state: TrainState, mesh: TriangleMesh, samples: GeodesicSampleSet, iterations: int,
             learning_rate=None, pairs_per_step=None, callback=None) -> TrainState:
    """Continue optimizing on one mesh only; returns a new state.

    The learning rate restarts at ``learning_rate`` (default: a fifth of the
    configured initial rate) and decays polynomially over ``iterations``.
    """
    samples.check_mesh(mesh)
    new = copy.deepcopy(state)
    if iterations <= 0:
        return new
    if new.rng is None:
        new.rng = np.random.default_rng(new.config.seed)
    item = _prepare(mesh, samples, new.model.config)
    lr = learning_rate if learning_rate is not None else 0.2 * new.config.learning_rate
    pairs = pairs_per_step or new.config.pairs_per_mesh
    _optimize(new, [item], [], iterations, iterations, lr, 1, pairs, 1, _Logger(None), callback,
              count_epochs=False)
    return new
