"""Training harness: masked reconstruction loss, two-group Adam, and a
deterministic epoch loop with validation tracking and resumable state.

The shallow encoder and reconstruction convs ("encoder" group) and the
attention/transformer blocks ("cot" group) run at separate learning
rates. Everything random funnels through generators derived from the
one configured seed, and all trainer state (optimizer moments, shuffle
generator, best score) round-trips through the output directory, so a
resumed run reproduces the uninterrupted trajectory bit for bit.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from cotmisr import metrics as MX
from cotmisr import model as M
from cotmisr.data import LrStack, preprocess
from cotmisr.errors import ConfigError, DataError, NumericalError
from cotmisr.tensor import Tensor

__all__ = [
    "TrainConfig",
    "Adam",
    "masked_loss",
    "train_step",
    "prepare_scene",
    "evaluate_scenes",
    "bicubic_baseline_scores",
    "fit",
    "FitResult",
]

HISTORY_COLUMNS = ("epoch", "train_loss", "val_cpsnr", "val_cssim", "lr_encoder", "lr_cot")


@dataclass
class TrainConfig:
    """Optimization hyperparameters."""

    lr_encoder: float = 0.002
    lr_cot: float = 0.001
    batch_size: int = 8
    epochs: int = 100
    max_steps: int = 0  # 0 means no cap
    seed: int = 0
    loss_kind: str = "masked_l1"  # or "masked_mse"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lr_decay: float = 1.0  # multiplicative factor per epoch
    min_clearance: float = 0.85

    def validate(self) -> "TrainConfig":
        if self.lr_encoder < 0 or self.lr_cot < 0:
            raise ConfigError("learning rates must be non-negative")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.loss_kind not in ("masked_l1", "masked_mse"):
            raise ConfigError(f"unknown loss kind {self.loss_kind!r}")
        if not 0.0 < self.lr_decay <= 1.0:
            raise ConfigError(f"lr_decay must be in (0,1], got {self.lr_decay}")
        return self


def masked_loss(sr: Tensor, hr: np.ndarray, hr_mask: np.ndarray, kind: str = "masked_l1") -> Tensor:
    """Bias-corrected reconstruction error over clear pixels.

    Per sample, the mean clear-pixel difference is removed before the
    L1 (or squared) penalty, matching the brightness convention of the
    evaluation metric: a constant offset costs nothing.
    """
    mask = np.broadcast_to(np.asarray(hr_mask, bool), sr.shape)
    counts = mask.reshape(sr.shape[0], -1).sum(axis=1).astype(np.float64)
    if (counts == 0).any():
        raise DataError("a sample in the batch has an empty clearance mask")
    mask_t = Tensor(mask.astype(sr.data.dtype))
    counts_t = Tensor(counts.astype(sr.data.dtype))
    diff = (Tensor(np.asarray(hr, dtype=sr.data.dtype)) - sr) * mask_t
    bias = diff.sum(axis=(1, 2, 3), keepdims=True) / counts_t.reshape(-1, 1, 1, 1)
    resid = (diff - bias) * mask_t
    per = resid.abs() if kind == "masked_l1" else resid * resid
    per_sample = per.sum(axis=(1, 2, 3)) / counts_t
    return per_sample.mean()


class Adam(object):
    """Adam with one learning rate per parameter group."""

    def __init__(self, params: M.ModelParams, cfg: TrainConfig):
        self.params = params
        self.beta1 = cfg.beta1
        self.beta2 = cfg.beta2
        self.eps = cfg.eps
        self.t = 0
        self.m = {name: np.zeros_like(t.data) for name, t in params.items()}
        self.v = {name: np.zeros_like(t.data) for name, t in params.items()}

    def step(self, lr_by_group: dict[str, float]) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            lr = lr_by_group[M.ModelParams.group_of(name)]
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for name in self.m:
            out[f"m.{name}"] = self.m[name]
            out[f"v.{name}"] = self.v[name]
        return out

    def load_state_arrays(self, arrays, t: int) -> None:
        self.t = t
        for name in self.m:
            self.m[name] = arrays[f"m.{name}"].copy()
            self.v[name] = arrays[f"v.{name}"].copy()


def _grad_norm(params: M.ModelParams, group: str) -> float:
    total = 0.0
    for _, p in params.group_items(group):
        if p.grad is not None:
            total += float((p.grad.astype(np.float64) ** 2).sum())
    return float(np.sqrt(total))


def train_step(
    batch: tuple[np.ndarray, np.ndarray, np.ndarray],
    params: M.ModelParams,
    model_cfg: M.CotConfig,
    train_cfg: TrainConfig,
    optimizer: Adam,
    lr_by_group: dict[str, float] | None = None,
    dropout_rng=None,
) -> dict[str, float]:
    """One forward/backward/update on a (frames, hr, hr_mask) batch."""
    frames, hr, hr_mask = batch
    if lr_by_group is None:
        lr_by_group = {"encoder": train_cfg.lr_encoder, "cot": train_cfg.lr_cot}
    params.zero_grads()
    dtype = next(iter(params.tensors())).data.dtype
    sr = M.forward(Tensor(frames.astype(dtype)), params, model_cfg, dropout_rng=dropout_rng)
    loss = masked_loss(sr, hr, hr_mask, kind=train_cfg.loss_kind)
    loss_value = float(loss.data)
    if not np.isfinite(loss_value):
        raise NumericalError(f"non-finite loss at optimizer step {optimizer.t + 1}")
    loss.backward()
    metrics = {
        "loss": loss_value,
        "grad_norm_encoder": _grad_norm(params, "encoder"),
        "grad_norm_cot": _grad_norm(params, "cot"),
    }
    optimizer.step(lr_by_group)
    return metrics


# -- scene preparation and validation ---------------------------------------------


@dataclass
class PreparedScene:
    scene_id: str
    band: str
    frames: np.ndarray  # (k, 1, H, W) float64 in [0, 1]
    hr: np.ndarray | None
    hr_mask: np.ndarray | None


def prepare_scene(stack: LrStack, model_cfg: M.CotConfig, min_clearance: float = 0.85) -> PreparedScene:
    """Apply mask preprocessing and frame-count normalization for the model."""
    cleaned = preprocess(stack, min_clearance=min_clearance)
    frames, _ = M.pad_frames(cleaned.frames, cleaned.masks, model_cfg.k)
    arr = np.stack(frames)[:, None, :, :]
    return PreparedScene(
        scene_id=stack.scene_id, band=stack.band, frames=arr, hr=stack.hr, hr_mask=stack.hr_mask
    )


def evaluate_scenes(
    scenes: list[PreparedScene], params: M.ModelParams, model_cfg: M.CotConfig
) -> tuple[float, float, list[tuple[str, str, MX.SceneScore]]]:
    """Score every scene against its ground truth; returns means and rows."""
    rows = []
    for scene in scenes:
        if scene.hr is None:
            raise DataError(f"{scene.scene_id}: cannot evaluate a scene without ground truth")
        sr = M.super_resolve(scene.frames, params, model_cfg)[0]
        rows.append((scene.scene_id, scene.band, MX.cpsnr(sr, scene.hr, scene.hr_mask)))
    mean_cpsnr = float(np.mean([s.cpsnr for _, _, s in rows]))
    mean_cssim = float(np.mean([s.cssim for _, _, s in rows]))
    return mean_cpsnr, mean_cssim, rows


def bicubic_baseline_scores(
    stacks: list[LrStack], r: int
) -> tuple[float, float, list[tuple[str, str, MX.SceneScore]]]:
    """Score the clearest frame of each scene, bicubic-upscaled by r."""
    rows = []
    for stack in stacks:
        if stack.hr is None:
            raise DataError(f"{stack.scene_id}: cannot evaluate a scene without ground truth")
        clearances = stack.clearances
        clearest = max(range(stack.k), key=lambda i: (clearances[i], -i))
        up = MX.bicubic_upscale(stack.frames[clearest], r)
        rows.append((stack.scene_id, stack.band, MX.cpsnr(up, stack.hr, stack.hr_mask)))
    mean_cpsnr = float(np.mean([s.cpsnr for _, _, s in rows]))
    mean_cssim = float(np.mean([s.cssim for _, _, s in rows]))
    return mean_cpsnr, mean_cssim, rows


# -- fit loop -------------------------------------------------------------------------


@dataclass
class FitResult:
    checkpoint: Path
    best_checkpoint: Path
    history: Path
    history_rows: list[dict] = field(default_factory=list)
    best_cpsnr: float = -np.inf
    final_val_cpsnr: float = np.nan
    final_val_cssim: float = np.nan


def _format_history_row(row: dict) -> str:
    return ",".join(
        [
            str(row["epoch"]),
            repr(row["train_loss"]),
            repr(row["val_cpsnr"]),
            repr(row["val_cssim"]),
            repr(row["lr_encoder"]),
            repr(row["lr_cot"]),
        ]
    )


def fit(
    train_stacks: list[LrStack],
    val_stacks: list[LrStack],
    model_cfg: M.CotConfig,
    train_cfg: TrainConfig,
    out_dir,
    config_text: str = "",
    resume: bool = False,
) -> FitResult:
    """Run the epoch loop, keeping the best-validation checkpoint.

    Writes checkpoint.cotm (final weights), checkpoint_best.cotm (best
    validation cPSNR), history.csv (one row per epoch), and the trainer
    state needed to resume. With ``resume`` the run continues toward
    ``train_cfg.epochs`` total epochs, reproducing the uninterrupted
    trajectory exactly.
    """
    model_cfg.validate()
    train_cfg.validate()
    if not train_stacks:
        raise DataError("no training scenes")
    if not val_stacks:
        raise DataError("no validation scenes")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt_path = out_dir / "checkpoint.cotm"
    best_path = out_dir / "checkpoint_best.cotm"
    history_path = out_dir / "history.csv"
    state_path = out_dir / "trainer_state.json"
    adam_path = out_dir / "adam_state.npz"

    train_scenes = [prepare_scene(s, model_cfg, train_cfg.min_clearance) for s in train_stacks]
    val_scenes = [prepare_scene(s, model_cfg, train_cfg.min_clearance) for s in val_stacks]
    for scene in train_scenes:
        if scene.hr is None:
            raise DataError(f"{scene.scene_id}: training scene has no ground truth")
        if scene.frames.shape != train_scenes[0].frames.shape:
            raise DataError("training scenes disagree on frame extents")

    shuffle_rng = np.random.default_rng([train_cfg.seed, 1])
    dropout_rng = np.random.default_rng([train_cfg.seed, 2])

    if resume:
        if not state_path.exists():
            raise DataError(f"{out_dir}: nothing to resume from (missing trainer state)")
        state = json.loads(state_path.read_text())
        _, arrays = M.load_checkpoint(ckpt_path)
        params = M.params_from_arrays(arrays)
        optimizer = Adam(params, train_cfg)
        with np.load(adam_path) as npz:
            optimizer.load_state_arrays(npz, t=state["adam_t"])
        shuffle_rng.bit_generator.state = state["shuffle_rng_state"]
        dropout_rng.bit_generator.state = state["dropout_rng_state"]
        start_epoch = state["epoch_next"]
        global_step = state["global_step"]
        best_cpsnr = state["best_cpsnr"]
        history_rows: list[dict] = state["history_rows"]
    else:
        params = M.init_params(model_cfg, seed=train_cfg.seed, dtype=np.float32)
        optimizer = Adam(params, train_cfg)
        start_epoch = 0
        global_step = 0
        best_cpsnr = -np.inf
        history_rows = []
        history_path.write_text(",".join(HISTORY_COLUMNS) + "\n")

    n = len(train_scenes)
    stop = False
    for epoch in range(start_epoch, train_cfg.epochs):
        if train_cfg.max_steps and global_step >= train_cfg.max_steps:
            break
        decay = train_cfg.lr_decay**epoch
        lrs = {"encoder": train_cfg.lr_encoder * decay, "cot": train_cfg.lr_cot * decay}
        order = shuffle_rng.permutation(n)
        losses = []
        for lo in range(0, n, train_cfg.batch_size):
            if train_cfg.max_steps and global_step >= train_cfg.max_steps:
                stop = True
                break
            chosen = [train_scenes[i] for i in order[lo : lo + train_cfg.batch_size]]
            batch = (
                np.stack([s.frames for s in chosen]),
                np.stack([s.hr[None] for s in chosen]),
                np.stack([s.hr_mask[None] for s in chosen]),
            )
            rng = dropout_rng if model_cfg.tblock.dropout > 0 else None
            metrics = train_step(batch, params, model_cfg, train_cfg, optimizer, lrs, rng)
            losses.append(metrics["loss"])
            global_step += 1

        val_cpsnr, val_cssim, _ = evaluate_scenes(val_scenes, params, model_cfg)
        row = {
            "epoch": epoch,
            "train_loss": float(np.mean(losses)) if losses else float("nan"),
            "val_cpsnr": val_cpsnr,
            "val_cssim": val_cssim,
            "lr_encoder": lrs["encoder"],
            "lr_cot": lrs["cot"],
        }
        history_rows.append(row)
        with open(history_path, "a") as f:
            f.write(_format_history_row(row) + "\n")
        if val_cpsnr > best_cpsnr:
            best_cpsnr = val_cpsnr
            M.save_checkpoint(best_path, params, config_text)
        if stop:
            break

    M.save_checkpoint(ckpt_path, params, config_text)
    if not best_path.exists():
        M.save_checkpoint(best_path, params, config_text)
    np.savez(adam_path, **optimizer.state_arrays())
    state = {
        "epoch_next": history_rows[-1]["epoch"] + 1 if history_rows else 0,
        "global_step": global_step,
        "adam_t": optimizer.t,
        "best_cpsnr": best_cpsnr,
        "shuffle_rng_state": shuffle_rng.bit_generator.state,
        "dropout_rng_state": dropout_rng.bit_generator.state,
        "history_rows": history_rows,
    }
    state_path.write_text(json.dumps(state, indent=1, sort_keys=True))

    last = history_rows[-1] if history_rows else {"val_cpsnr": np.nan, "val_cssim": np.nan}
    return FitResult(
        checkpoint=ckpt_path,
        best_checkpoint=best_path,
        history=history_path,
        history_rows=history_rows,
        best_cpsnr=best_cpsnr,
        final_val_cpsnr=last["val_cpsnr"],
        final_val_cssim=last["val_cssim"],
    )
