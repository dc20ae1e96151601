"""Optimizer, schedules, checkpoints, and the epoch loop.

Per-sample gradients are averaged over the minibatch (so the learning
rate is decoupled from batch size), globally norm-clipped, and applied
with bias-corrected ADAM; bounded model constants are re-clamped after
every update.  Model selection tracks validation accuracy with ties
resolved toward the earlier epoch.  Metrics are emitted as JSON lines,
one object per epoch.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import data as data_mod
from . import network
from .config import RunConfig
from .data import Dataset, load_arrays, save_arrays
from .engine import HyprEngine
from .errors import ConfigError
from .losses import LossSpec
from .network import LayerParams, LayerSpec, NetworkConfig, init_params


@dataclass(frozen=True)
class Schedule:
    kind: str
    init_lr: float
    total_epochs: int

    def __post_init__(self):
        if self.kind not in ("constant", "linear", "cosine"):
            raise ConfigError(f"unknown schedule {self.kind!r}")
        if self.init_lr < 0 or self.total_epochs < 1:
            raise ConfigError("schedule needs lr >= 0 and at least one epoch")


def lr_schedule(schedule: Schedule, epoch: int) -> float:
    if not 0 <= epoch < schedule.total_epochs:
        raise ConfigError(
            f"epoch {epoch} outside schedule of {schedule.total_epochs}"
        )
    frac = epoch / schedule.total_epochs
    if schedule.kind == "constant":
        return schedule.init_lr
    if schedule.kind == "linear":
        return schedule.init_lr * (1.0 - frac)
    return schedule.init_lr * 0.5 * (1.0 + np.cos(np.pi * frac))


@dataclass
class AdamState:
    m: list
    v: list
    step: int = 0


def adam_init(params: list[LayerParams]) -> AdamState:
    return AdamState(
        m=[p.grad_template(np.float64) for p in params],
        v=[p.grad_template(np.float64) for p in params],
    )


def adam_update(
    params: list[LayerParams],
    grads: list,
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """Bias-corrected ADAM step, in place on the parameter arrays."""
    state.step += 1
    c1 = 1.0 - beta1**state.step
    c2 = 1.0 - beta2**state.step
    for p, g_layer, m_layer, v_layer in zip(params, grads, state.m, state.v):
        arrays = p.trainable_arrays()
        for key, arr in arrays.items():
            g = np.asarray(g_layer[key], dtype=np.float64)
            m = m_layer[key]
            v = v_layer[key]
            m *= beta1
            m += (1.0 - beta1) * g
            v *= beta2
            v += (1.0 - beta2) * g * g
            arr -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


def global_norm(grads: list) -> float:
    total = 0.0
    for layer in grads:
        for g in layer.values():
            total += float(np.sum(np.asarray(g, dtype=np.float64) ** 2))
    return float(np.sqrt(total))


def clip_gradient(grads: list, max_norm: float | None) -> list:
    """Rescale to the target global L2 norm when exceeded; idempotent."""
    if max_norm is None:
        return grads
    if max_norm <= 0:
        raise ConfigError(f"clip norm must be positive, got {max_norm}")
    for _ in range(4):  # repeat while 1-ulp rounding leaves us above
        norm = global_norm(grads)
        if norm <= max_norm:
            break
        scale = max_norm / norm
        for layer in grads:
            for g in layer.values():
                g *= scale
    return grads


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def _flatten_params(params: list[LayerParams]) -> dict:
    out = {}
    for li, p in enumerate(params):
        for key, arr in p.trainable_arrays().items():
            out[f"layer{li}/{key}"] = arr
        for key, val in p.fixed.items():
            if isinstance(val, np.ndarray):
                out[f"layer{li}/fixed/{key}"] = val
    return out


def checkpoint_save(path: str, params: list[LayerParams], opt: AdamState | None = None):
    arrays = _flatten_params(params)
    if opt is not None:
        arrays["opt/step"] = np.array([opt.step], dtype=np.int64)
        for li, (m_l, v_l) in enumerate(zip(opt.m, opt.v)):
            for key, arr in m_l.items():
                arrays[f"opt/m/layer{li}/{key}"] = arr
            for key, arr in v_l.items():
                arrays[f"opt/v/layer{li}/{key}"] = arr
    save_arrays(path, arrays)


def _fill(target: np.ndarray, stored: np.ndarray, name: str) -> None:
    if stored.shape != target.shape:
        raise ConfigError(
            f"checkpoint entry {name}: shape {stored.shape} != expected {target.shape}"
        )
    if stored.dtype.itemsize > target.dtype.itemsize:
        raise ConfigError(
            f"checkpoint entry {name}: refusing to narrow {stored.dtype} "
            f"into {target.dtype}"
        )
    target[...] = stored.astype(target.dtype)  # widening is explicit and exact


def checkpoint_load(
    path: str, params: list[LayerParams], opt: AdamState | None = None
) -> None:
    """Fill existing parameter (and optimizer) arrays from a checkpoint."""
    arrays = load_arrays(path)
    for li, p in enumerate(params):
        for key, arr in p.trainable_arrays().items():
            name = f"layer{li}/{key}"
            if name not in arrays:
                raise ConfigError(f"checkpoint missing entry {name}")
            _fill(arr, arrays[name], name)
        for key, val in p.fixed.items():
            name = f"layer{li}/fixed/{key}"
            if isinstance(val, np.ndarray) and name in arrays:
                _fill(val, arrays[name], name)
    if opt is not None:
        if "opt/step" not in arrays:
            raise ConfigError("checkpoint has no optimizer state")
        opt.step = int(arrays["opt/step"][0])
        for li, (m_l, v_l) in enumerate(zip(opt.m, opt.v)):
            for key in m_l:
                _fill(m_l[key], arrays[f"opt/m/layer{li}/{key}"], key)
                _fill(v_l[key], arrays[f"opt/v/layer{li}/{key}"], key)


# ---------------------------------------------------------------------------
# dataset assembly and evaluation
# ---------------------------------------------------------------------------


def datasets_from_config(cfg: RunConfig):
    """Build (train, valid, test-or-None) splits per the run config."""
    ds_cfg = cfg.dataset
    kind = ds_cfg["kind"]
    if kind == "cue":
        spec = data_mod.CueTaskSpec(
            n_samples=ds_cfg["samples"],
            t_pat=ds_cfg["t_pat"],
            t_delay=ds_cfg["delay"],
            p_active=ds_cfg["p_active"],
            seed=ds_cfg["data_seed"],
        )
        full = data_mod.generate_cue_dataset(spec)
        splits = data_mod.split_dataset(full, ds_cfg["split"], ds_cfg["data_seed"])
    elif kind == "container":
        full = data_mod.load_dataset_file(ds_cfg["path"])
        splits = data_mod.split_dataset(full, ds_cfg["split"], ds_cfg["data_seed"])
    elif kind == "idx":
        images = data_mod.load_idx_images(ds_cfg["images"])
        labels = data_mod.load_idx_labels(ds_cfg["labels"])
        full = data_mod.pixel_sequence_dataset(images, labels, cfg.classes, "idx-train")
        if ds_cfg["limit_train"]:
            keep = np.random.default_rng(ds_cfg["data_seed"]).permutation(len(full))
            full = full.subset(keep[: ds_cfg["limit_train"]])
        frac = ds_cfg["split"]
        if len(frac) == 3 and ds_cfg["test_images"]:
            # test comes from dedicated files; renormalize train/valid
            frac = [f / (frac[0] + frac[1]) for f in frac[:2]]
        splits = data_mod.split_dataset(full, frac, ds_cfg["data_seed"])
    else:
        raise ConfigError(f"unknown dataset kind {kind!r}")
    train, valid = splits[0], splits[1]
    test = splits[2] if len(splits) > 2 else None
    if kind == "idx" and ds_cfg["test_images"]:
        test = data_mod.pixel_sequence_dataset(
            data_mod.load_idx_images(ds_cfg["test_images"]),
            data_mod.load_idx_labels(ds_cfg["test_labels"]),
            cfg.classes,
            "idx-test",
        )
    if len(train) == 0:
        raise ConfigError("empty dataset")
    if train.input_dim != cfg.input_dim:
        raise ConfigError(
            f"dataset input dim {train.input_dim} != configured {cfg.input_dim}"
        )
    if train.n_classes != cfg.classes:
        raise ConfigError(
            f"dataset classes {train.n_classes} != configured {cfg.classes}"
        )
    return train, valid, test


def loss_spec_for(cfg: RunConfig, ds: Dataset) -> LossSpec:
    return LossSpec(
        n_classes=cfg.classes,
        t0=cfg.t0,
        mask=ds.loss_mask,
        per_step_targets=ds.per_step_targets,
    )


class _EnginePool:
    """Engines per batch size, sharing one ledger for peak accounting."""

    def __init__(self, params, lam, loss_spec, dtype, workers):
        from .accounting import BufferLedger

        self.params = params
        self.lam = lam
        self.loss_spec = loss_spec
        self.dtype = dtype
        self.workers = workers
        self.ledger = BufferLedger()
        self._engines: dict[int, HyprEngine] = {}

    def get(self, batch: int) -> HyprEngine:
        if batch not in self._engines:
            self._engines[batch] = HyprEngine(
                self.params, self.lam, batch, self.loss_spec,
                dtype=self.dtype, workers=self.workers, ledger=self.ledger,
            )
        return self._engines[batch]


def _batch_correct(res, prediction: str, targets: np.ndarray) -> tuple[int, int]:
    if prediction == "per_step":
        return int(res.per_step_correct.sum()), targets.shape[0] * res.n_active
    agg = res.sum_u if prediction == "mean" else res.sum_softmax
    pred = np.argmax(agg, axis=-1)
    seq_targets = targets if targets.ndim == 1 else targets[:, -1]
    return int(np.sum(pred == seq_targets)), targets.shape[0]


def evaluate_dataset(
    pool: _EnginePool, params, ds: Dataset, prediction: str, batch_size: int
):
    """Forward-only pass over a dataset; returns (mean loss, accuracy)."""
    loss_sum, correct, total = 0.0, 0, 0
    for start in range(0, len(ds), batch_size):
        idx = np.arange(start, min(start + batch_size, len(ds)))
        eng = pool.get(len(idx))
        res = eng.train_sequence(
            params, ds.inputs[idx], ds.targets[idx], with_grads=False
        )
        loss_sum += float(res.seq_loss.sum())
        c, t = _batch_correct(res, prediction, ds.targets[idx])
        correct += c
        total += t
    return loss_sum / len(ds), correct / total


@dataclass
class FitResult:
    metrics: list
    best_params: list
    best_epoch: int
    best_valid_acc: float
    out_dir: str
    test_acc: float | None = None
    datasets: tuple = field(default_factory=tuple, repr=False)


def _clone_params(params: list[LayerParams]) -> list[LayerParams]:
    return [
        LayerParams(
            kind=p.kind,
            w_ff=p.w_ff.copy(),
            w_rec=None if p.w_rec is None else p.w_rec.copy(),
            bias=p.bias.copy(),
            consts={k: v.copy() for k, v in p.consts.items()},
            fixed={
                k: v.copy() if isinstance(v, np.ndarray) else v
                for k, v in p.fixed.items()
            },
            surrogate=p.surrogate,
        )
        for p in params
    ]


def fit(
    cfg: RunConfig,
    seed: int | None = None,
    out_dir: str | None = None,
    log=None,
    eval_test: bool = False,
) -> FitResult:
    """Full training run: epochs, model selection, metrics JSONL."""
    seed = cfg.seed if seed is None else seed
    out_dir = out_dir or cfg.out_dir
    os.makedirs(out_dir, exist_ok=True)
    train, valid, test = datasets_from_config(cfg)
    loss_spec = loss_spec_for(cfg, train)
    net_cfg = NetworkConfig(
        input_dim=cfg.input_dim,
        hidden=[LayerSpec(h.kind, h.m, h.recurrent) for h in cfg.hidden],
        classes=cfg.classes,
        seed=seed,
    )
    params = init_params(
        net_cfg, surrogate=cfg.surrogate, init=cfg.init,
        fixed_overrides={"theta": cfg.theta},
    )
    state = adam_init(params)
    sched = Schedule(cfg.schedule, cfg.lr, cfg.epochs)
    pool = _EnginePool(params, cfg.lam, loss_spec, cfg.dtype, cfg.workers)
    rng = np.random.default_rng(seed)
    metrics_path = os.path.join(out_dir, "metrics.jsonl")
    best_acc, best_epoch, best_params = -1.0, -1, _clone_params(params)
    metrics = []
    with open(metrics_path, "w", encoding="utf-8") as metrics_fh:
        for epoch in range(cfg.epochs):
            wall_start = time.perf_counter()
            lr = float(lr_schedule(sched, epoch))
            order = rng.permutation(len(train))
            loss_sum, correct, total = 0.0, 0, 0
            for start in range(0, len(train), cfg.batch_size):
                idx = order[start : start + cfg.batch_size]
                eng = pool.get(len(idx))
                res = eng.train_sequence(params, train.inputs[idx], train.targets[idx])
                grads = res.mean_apg()
                clip_gradient(grads, cfg.clip)
                adam_update(params, grads, state, lr)
                network.clip_constants(params)
                loss_sum += float(res.seq_loss.sum())
                c, t = _batch_correct(res, cfg.prediction, train.targets[idx])
                correct += c
                total += t
            valid_loss, valid_acc = evaluate_dataset(
                pool, params, valid, cfg.prediction, cfg.batch_size
            )
            train_acc = correct / total
            row = {
                "epoch": epoch,
                "lr": lr,
                "train_loss": loss_sum / len(train),
                "train_acc": train_acc,
                "valid_acc": valid_acc,
                "wall_ms": (time.perf_counter() - wall_start) * 1e3,
                "peak_bytes": pool.ledger.peak_bytes,
            }
            metrics.append(row)
            metrics_fh.write(json.dumps(row, sort_keys=True) + "\n")
            metrics_fh.flush()
            if log:
                log(
                    f"epoch {epoch:4d}  lr {lr:.5f}  loss {row['train_loss']:.4f}  "
                    f"train {train_acc:.3f}  valid {valid_acc:.3f}"
                )
            if valid_acc > best_acc:
                best_acc, best_epoch = valid_acc, epoch
                best_params = _clone_params(params)
                checkpoint_save(os.path.join(out_dir, "best.ckpt"), params, state)
            if (
                cfg.early_stop_train_acc is not None
                and train_acc >= cfg.early_stop_train_acc
            ):
                break
    test_acc = None
    if eval_test and test is not None:
        _, test_acc = evaluate_dataset(
            pool, best_params, test, cfg.prediction, cfg.batch_size
        )
    return FitResult(
        metrics=metrics,
        best_params=best_params,
        best_epoch=best_epoch,
        best_valid_acc=best_acc,
        out_dir=out_dir,
        test_acc=test_acc,
        datasets=(train, valid, test),
    )
