"""Training loop: masked L1 targets, Adam with per-epoch decay, validation-SDR snapshots."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import dsp
from .data import Utterance
from .metrics import bss_eval
from .model.arch import ArchSpec, canonical_archs, uses_recurrence
from .model.checkpoint import save_checkpoint
from .model.net import Network, UNet, build_model, irm
from .optim import adam_step, clip_gradients, zero_grad
from .tensor import Tape, Tensor, backward, l1_loss, no_grad

__all__ = [
    "TrainConfig",
    "TrainState",
    "EpochRecord",
    "Example",
    "Batch",
    "TrainingDiverged",
    "prepare",
    "make_batches",
    "compute_loss",
    "split_train_val",
    "default_lr",
    "enhance_features",
    "enhance",
    "validate",
    "recalibrate_bn",
    "train",
]

LOG_HEADER = ("epoch", "lr", "train_loss", "val_sdr", "snapshot_flag")


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 15
    lr0: float | None = None  # None: 0.01 with recurrent blocks, 0.001 otherwise
    lr_decay: float = 0.99
    val_fraction: float = 0.10
    seed: int = 0
    target_mode: str = "mapping"
    clip_threshold: float = 100.0
    clip_all: bool = False
    dtype: str = "float32"
    bss_filter_len: int = 512
    recalibrate_bn: bool = True  # refresh running statistics from the training set each epoch

    def __post_init__(self):
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in (0, 1)")
        if self.lr0 is not None and self.lr0 <= 0:
            raise ValueError("lr0 must be positive")
        if self.target_mode not in ("mapping", "irm"):
            raise ValueError(f"target_mode must be 'mapping' or 'irm', got {self.target_mode!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    val_sdr: float
    snapshot: bool


@dataclass
class TrainState:
    epoch: int = 0
    lr_current: float = 0.0
    best_val_sdr: float = -math.inf
    best_epoch: int = 0
    best_checkpoint_path: Path | None = None
    history: list[EpochRecord] = field(default_factory=list)

    @property
    def losses(self) -> list[float]:
        return [h.train_loss for h in self.history]


class TrainingDiverged(RuntimeError):
    pass


def default_lr(arch) -> float:
    if isinstance(arch, str):
        if arch in ("FCLN", "RNN"):
            return 0.001
        arch = canonical_archs()[arch]
    if isinstance(arch, ArchSpec):
        return 0.01 if uses_recurrence(arch) else 0.001
    return 0.001


# -- data plumbing -------------------------------------------------------------

@dataclass
class Example:
    """One utterance in network terms: noisy input, both targets, what validation needs."""

    id: str
    Y: np.ndarray  # [64, N] noisy log-mel
    S: np.ndarray  # clean log-mel
    N: np.ndarray  # noise log-mel
    mask_target: np.ndarray  # IRM on linear mel magnitudes
    phase: np.ndarray
    length: int
    clean: dsp.Waveform
    noise: dsp.Waveform

    @property
    def n_frames(self) -> int:
        return self.Y.shape[1]


def prepare(utterances: list[Utterance]) -> list[Example]:
    out = []
    for u in utterances:
        mix, clean, noise = u.spectrograms()
        out.append(Example(
            u.id, mix.logmel, clean.logmel, noise.logmel,
            irm(np.exp(clean.logmel), np.exp(noise.logmel)),
            mix.phase, mix.length, u.clean, u.noise,
        ))
    return out


@dataclass
class Batch:
    ids: list[str]
    Y: np.ndarray  # [b, 64, Nmax]
    S: np.ndarray
    N: np.ndarray
    M: np.ndarray
    mask: np.ndarray  # [b, Nmax], 1 on real frames


def _pad_stack(arrays, n_max):
    return np.stack([np.pad(a, ((0, 0), (0, n_max - a.shape[1]))) for a in arrays])


def collate(examples: list[Example]) -> Batch:
    n_max = max(e.n_frames for e in examples)
    mask = np.zeros((len(examples), n_max))
    for i, e in enumerate(examples):
        mask[i, :e.n_frames] = 1.0
    return Batch(
        [e.id for e in examples],
        _pad_stack([e.Y for e in examples], n_max),
        _pad_stack([e.S for e in examples], n_max),
        _pad_stack([e.N for e in examples], n_max),
        _pad_stack([e.mask_target for e in examples], n_max),
        mask,
    )


def make_batches(examples: list[Example], batch_size: int, seed: int, epoch: int = 0) -> list[Batch]:
    """Shuffle with a generator keyed by ``(seed, epoch)`` and zero-pad each batch."""
    order = np.random.default_rng([seed, epoch]).permutation(len(examples))
    return [
        collate([examples[i] for i in order[s:s + batch_size]])
        for s in range(0, len(order), batch_size)
    ]


def split_train_val(examples: list, val_fraction: float, seed: int):
    """Seeded hold-out. If the fraction rounds to zero utterances, validate on the training set."""
    n_val = int(round(val_fraction * len(examples)))
    if n_val == 0 or n_val >= len(examples):
        return list(examples), list(examples)
    perm = np.random.default_rng([seed, 0x7A1]).permutation(len(examples))
    val = sorted(perm[:n_val])
    train = sorted(perm[n_val:])
    return [examples[i] for i in train], [examples[i] for i in val]


def compute_loss(model_out: Tensor, batch: Batch, mode: str = "mapping") -> Tensor:
    """Masked L1: ``|S_hat-S| + |N_hat-N|`` (mapping) or ``|mask_hat-IRM|`` (irm)."""
    m = batch.mask[:, None, :]
    if mode == "mapping":
        return l1_loss(model_out[..., 0], batch.S, m) + l1_loss(model_out[..., 1], batch.N, m)
    if mode == "irm":
        return l1_loss(model_out[..., 0], batch.M, m)
    raise ValueError(f"unknown target mode {mode!r}")


# -- inference -----------------------------------------------------------------

def enhance_features(model: Network, logmel: np.ndarray) -> np.ndarray:
    """Noisy log-mel ``[64, N]`` -> enhanced log-mel, eval mode, no tape."""
    with no_grad():
        out = model(logmel[None], training=False).data[0]
    if model.output_mode == "mapping":
        return out[..., 0].astype(np.float64)
    gain = np.clip(out[..., 0].astype(np.float64), 0.0, 1.0)
    return np.log(np.maximum(gain * np.exp(logmel), dsp.LOG_FLOOR))


def enhance(model: Network, mixture: dsp.Waveform) -> dsp.Waveform:
    """Noisy waveform -> enhanced waveform of the same length (noisy phase reused)."""
    if mixture.sample_rate != dsp.SAMPLE_RATE:
        mixture = dsp.resample(mixture, dsp.SAMPLE_RATE)
    spec = dsp.features(mixture)
    return dsp.reconstruct(enhance_features(model, spec.logmel), spec.phase, spec.length)


def validate(model: Network, examples: list[Example], filter_len: int = 512) -> float:
    """Mean SDR of reconstructed estimates; touches neither parameters nor BN statistics."""
    sdrs = []
    for e in examples:
        est = dsp.reconstruct(enhance_features(model, e.Y), e.phase, e.length)
        sdrs.append(bss_eval(est, e.clean, e.noise, filter_len).sdr_db)
    return float(np.mean(sdrs))


# -- the loop ------------------------------------------------------------------

def recalibrate_bn(model: Network, batches: list[Batch]) -> None:
    """Replace every running mean/variance by its average over ``batches``.

    Each batch is run forward in training mode without gradients, so every
    layer sees inputs normalized the same way as during a training step.
    Batches are weighted by their number of valid frames.
    """
    if not model.bn:
        return
    saved = {k: (s.momentum, s.updates) for k, s in model.bn.items()}
    sums = {k: [0.0, 0.0] for k in model.bn}
    total = 0.0
    try:
        for batch in batches:
            for s in model.bn.values():
                s.momentum, s.updates = 0.0, 0
            with no_grad():
                model(batch.Y, mask=batch.mask, training=True)
            w = float(batch.mask.sum())
            total += w
            for k, s in model.bn.items():
                sums[k][0] = sums[k][0] + w * s.ema_mean
                sums[k][1] = sums[k][1] + w * s.ema_var
    finally:
        for k, s in model.bn.items():
            s.momentum, s.updates = saved[k]
    for k, s in model.bn.items():
        # stored so that the debiased read-out returns the average exactly
        scale = 1.0 - s.momentum ** max(s.updates, 1)
        s.updates = max(s.updates, 1)
        s.ema_mean = sums[k][0] / total * scale
        s.ema_var = sums[k][1] / total * scale


def _tune_allocator() -> None:
    # Large temporaries are otherwise returned to the OS after every op and
    # faulted back in on the next one, which dominates small-model step time.
    try:
        import ctypes

        libc = ctypes.CDLL("libc.so.6")
        libc.mallopt(-3, 1 << 30)  # M_MMAP_THRESHOLD
        # -1 wraps to SIZE_MAX: a step frees more than any int threshold
        libc.mallopt(-1, -1)  # M_TRIM_THRESHOLD
    except (OSError, AttributeError):
        pass


def train(
    arch,
    examples: list[Example],
    cfg: TrainConfig | None = None,
    checkpoint_path=None,
    log_path=None,
    progress=None,
) -> tuple[Network, TrainState]:
    """Train ``arch`` (spec, canonical name or built model) and return the best snapshot.

    ``progress`` is called with each :class:`EpochRecord` as it is produced.
    """
    cfg = cfg or TrainConfig()
    _tune_allocator()
    if isinstance(arch, Network):
        model = arch
    else:
        model = build_model(arch, seed=cfg.seed, dtype=np.dtype(cfg.dtype), output_mode=cfg.target_mode)
    if isinstance(model, UNet) and model.output_mode != cfg.target_mode:
        raise ValueError(f"model predicts {model.output_mode!r} but target_mode is {cfg.target_mode!r}")
    lr0 = cfg.lr0 if cfg.lr0 is not None else default_lr(getattr(model, "spec", arch))
    params = model.parameters()
    clipped = params if cfg.clip_all else [p for p in params if p.recurrent]

    train_set, val_set = split_train_val(examples, cfg.val_fraction, cfg.seed)
    state = TrainState(lr_current=lr0)
    best = None
    log = None
    if log_path is not None:
        log = open(log_path, "w", newline="")
        csv.writer(log).writerow(LOG_HEADER)
    try:
        for epoch in range(1, cfg.epochs + 1):
            lr = lr0 * cfg.lr_decay ** (epoch - 1)
            losses, weights = [], []
            for batch in make_batches(train_set, cfg.batch_size, cfg.seed, epoch):
                with Tape():
                    out = model(batch.Y, mask=batch.mask, training=True)
                    loss = compute_loss(out, batch, cfg.target_mode)
                    value = float(loss.data)
                    if not np.isfinite(value):
                        raise TrainingDiverged(
                            f"non-finite loss {value} at epoch {epoch}, batch {batch.ids}"
                        )
                    backward(loss)
                clip_gradients(clipped, cfg.clip_threshold)
                adam_step(params, lr)
                zero_grad(params)
                losses.append(value)
                weights.append(batch.mask.sum())
            train_loss = float(np.average(losses, weights=weights))
            if cfg.recalibrate_bn:
                recalibrate_bn(model, make_batches(train_set, cfg.batch_size, cfg.seed, epoch))
            val_sdr = validate(model, val_set, cfg.bss_filter_len)
            improved = val_sdr > state.best_val_sdr
            if improved:
                state.best_val_sdr = val_sdr
                state.best_epoch = epoch
                best = model.snapshot()
                if checkpoint_path is not None:
                    save_checkpoint(checkpoint_path, model, epoch=epoch, seed=cfg.seed,
                                    val_sdr=val_sdr, lr0=lr0)
                    state.best_checkpoint_path = Path(checkpoint_path)
            state.epoch = epoch
            state.lr_current = lr0 * cfg.lr_decay ** epoch
            rec = EpochRecord(epoch, lr, train_loss, val_sdr, improved)
            state.history.append(rec)
            if log is not None:
                csv.writer(log).writerow([epoch, f"{lr:.8g}", f"{train_loss:.8g}", f"{val_sdr:.6g}",
                                          int(improved)])
                log.flush()
            if progress is not None:
                progress(rec)
    finally:
        if log is not None:
            log.close()
    if best is not None:
        model.load_state_dict(best)
    return model, state
