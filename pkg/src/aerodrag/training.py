"""Dataset splits, Adam, plateau scheduling, checkpoints and the training loop."""

from __future__ import annotations

import contextlib
import csv
import io
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import aerometrics
from .autodiff import NonFiniteError, Tape, mse_loss
from .model import RegDGCNNConfig, RegDGCNNModel, forward, init_parameters
from .pointcloud import cache_name, make_rng, read_cache

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"RDGC"
CHECKPOINT_VERSION = 1


class TrainingError(RuntimeError):
    pass


class EmptyDataset(TrainingError):
    pass


class MissingCache(TrainingError):
    pass


class DivergedLoss(TrainingError):
    pass


class TooFewDesigns(ValueError):
    pass


class CheckpointError(IOError):
    pass


class CorruptFile(CheckpointError):
    pass


class VersionMismatch(CheckpointError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 32
    epochs: int = 100
    learning_rate: float = 1e-3
    scheduler_patience: int = 10
    scheduler_factor: float = 0.1
    scheduler_threshold: float = 1e-4
    min_lr: float = 1e-8
    seed: int = 0
    points_per_cloud: int = 5000
    train_fraction_of_train_split: float = 1.0
    deterministic: bool = False

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if not 0.0 < self.scheduler_factor < 1.0:
            raise ValueError("scheduler_factor must lie in (0, 1)")
        if not 0.0 < self.train_fraction_of_train_split <= 1.0:
            raise ValueError("train fraction must lie in (0, 1]")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


# ------------------------------------------------------------------ splits


@dataclass(frozen=True)
class SplitAssignment:
    train: list[str]
    validation: list[str]
    test: list[str]

    def as_dict(self) -> dict[str, list[str]]:
        return {"train": list(self.train), "validation": list(self.validation), "test": list(self.test)}


def split_sizes(n: int) -> tuple[int, int, int]:
    n_train = math.floor(0.70 * n)
    n_val = math.floor(0.15 * n)
    return n_train, n_val, n - n_train - n_val


def split_dataset(ids: Sequence[str], seed: int = 0) -> SplitAssignment:
    """Seeded 70/15/15 split. Train and validation sizes are floored; test takes the rest."""
    ids = sorted(set(ids))
    if len(ids) < 3:
        raise TooFewDesigns(f"need at least 3 designs to split, got {len(ids)}")
    order = make_rng(seed).permutation(len(ids))
    shuffled = [ids[i] for i in order]
    n_train, n_val, _ = split_sizes(len(ids))
    return SplitAssignment(
        shuffled[:n_train], shuffled[n_train : n_train + n_val], shuffled[n_train + n_val :]
    )


def train_subset(train_ids: Sequence[str], fraction: float, seed: int = 0) -> list[str]:
    """Prefix of one seeded shuffle, so smaller fractions nest inside larger ones."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError("fraction must lie in (0, 1]")
    order = make_rng(seed, 1).permutation(len(train_ids))
    n = max(1, math.floor(fraction * len(train_ids) + 1e-9))
    return [train_ids[i] for i in order[:n]]


# ------------------------------------------------------------------ Adam


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: dict, state: AdamState, lr: float) -> AdamState:
    """Bias-corrected Adam update, in place on each parameter's ``data``.

    A parameter whose ``grad`` is None is treated as having zero gradient.
    """
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {name}")
        m = state.m.setdefault(name, np.zeros_like(p.data))
        v = state.v.setdefault(name, np.zeros_like(p.data))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        update = lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data -= update.astype(p.data.dtype, copy=False)
    return state


# --------------------------------------------------------------- scheduler


@dataclass
class PlateauState:
    lr: float
    patience: int = 10
    factor: float = 0.1
    threshold: float = 1e-4
    min_lr: float = 1e-8
    best: float = math.inf
    num_bad_epochs: int = 0
    reductions: int = 0


def scheduler_step(history: Sequence[float], state: PlateauState) -> tuple[float, PlateauState]:
    """Reduce-on-plateau in min mode with a relative threshold and no cooldown.

    An epoch is bad unless it beats the best loss by the relative threshold.
    The rate drops as soon as ``patience`` consecutive bad epochs have been
    seen, then the counter restarts. Only the latest entry of ``history`` is
    consumed; call once per epoch.
    """
    if not history:
        raise ValueError("scheduler_step needs at least one recorded loss")
    current = float(history[-1])
    if current < state.best * (1.0 - state.threshold):
        state.best = current
        state.num_bad_epochs = 0
    else:
        state.num_bad_epochs += 1
    if state.num_bad_epochs >= state.patience:
        new_lr = max(state.lr * state.factor, state.min_lr)
        if new_lr < state.lr:
            state.reductions += 1
        state.lr = new_lr
        state.num_bad_epochs = 0
    return state.lr, state


# ----------------------------------------------------------------- dataset


@dataclass(frozen=True)
class TargetScaler:
    mean: float
    std: float

    @classmethod
    def fit(cls, values: Iterable[float]) -> "TargetScaler":
        v = np.asarray(list(values), dtype=np.float64)
        std = float(v.std())
        return cls(float(v.mean()), std if std > 0 else 1.0)

    def normalize(self, y):
        return (np.asarray(y, dtype=np.float64) - self.mean) / self.std

    def denormalize(self, z):
        return np.asarray(z, dtype=np.float64) * self.std + self.mean


class DesignDataset:
    """Design ids with drag targets, a split, and a point-cloud loader."""

    def __init__(self, targets: dict[str, float], split: SplitAssignment,
                 loader: Callable[[str], np.ndarray]):
        self.targets = dict(targets)
        self.split = split
        self._loader = loader
        missing = [i for part in split.as_dict().values() for i in part if i not in self.targets]
        if missing:
            raise EmptyDataset(f"split references ids without targets: {missing[:5]}")

    @classmethod
    def from_clouds(cls, clouds: dict[str, np.ndarray], targets: dict[str, float],
                    split: SplitAssignment) -> "DesignDataset":
        stored = {k: np.asarray(v, dtype=np.float32) for k, v in clouds.items()}

        def load(design_id):
            try:
                return stored[design_id]
            except KeyError:
                raise MissingCache(f"no point cloud for design {design_id!r}") from None

        return cls(targets, split, load)

    @classmethod
    def from_cache(cls, cache_dir: str | Path, targets: dict[str, float], split: SplitAssignment,
                   n_points: int, seed: int) -> "DesignDataset":
        cache_dir = Path(cache_dir)
        ids = [i for part in split.as_dict().values() for i in part]
        missing = [i for i in ids if not (cache_dir / cache_name(i, n_points, seed)).exists()]
        if missing:
            raise MissingCache(f"{len(missing)} designs lack cached clouds, e.g. {missing[:5]}")
        return cls(targets, split, lambda i: read_cache(cache_dir / cache_name(i, n_points, seed)))

    def cloud(self, design_id: str) -> np.ndarray:
        return self._loader(design_id)

    def batch(self, ids: Sequence[str]) -> np.ndarray:
        clouds = [self.cloud(i) for i in ids]
        sizes = {len(c) for c in clouds}
        if len(sizes) != 1:
            raise ValueError(f"clouds in a batch must share a point count, got {sorted(sizes)}")
        return np.stack(clouds)

    def y(self, ids: Sequence[str]) -> np.ndarray:
        return np.array([self.targets[i] for i in ids], dtype=np.float64)


# -------------------------------------------------------------- checkpoint


@dataclass
class Checkpoint:
    model_config: dict
    train_config: dict
    tensors: dict[str, np.ndarray]  # "param/...", "buffer/...", "adam.m/...", "adam.v/..."
    scaler: dict
    adam_t: int
    scheduler: dict
    epoch: int
    best_val: float
    rng: dict
    version: int = CHECKPOINT_VERSION

    def model(self) -> RegDGCNNModel:
        """Rebuild the model (inference mode) from the stored tensors."""
        cfg = RegDGCNNConfig.from_dict(self.model_config)
        model = init_parameters(cfg, 0)
        for name, p in model.parameters.items():
            p.data = self.tensors[f"param/{name}"].copy()
        for name in model.buffers:
            model.buffers[name] = self.tensors[f"buffer/{name}"].copy()
        return model.eval()

    def target_scaler(self) -> TargetScaler:
        return TargetScaler(**self.scaler)

    def adam_state(self) -> AdamState:
        m = {k[len("adam.m/"):]: v.copy() for k, v in self.tensors.items() if k.startswith("adam.m/")}
        v = {k[len("adam.v/"):]: a.copy() for k, a in self.tensors.items() if k.startswith("adam.v/")}
        return AdamState(m=m, v=v, t=self.adam_t)


def make_checkpoint(model: RegDGCNNModel, cfg: TrainConfig, adam: AdamState, scaler: TargetScaler,
                    sched: PlateauState, epoch: int, best_val: float) -> Checkpoint:
    tensors = {f"param/{k}": p.data.copy() for k, p in model.parameters.items()}
    tensors.update({f"buffer/{k}": b.copy() for k, b in model.buffers.items()})
    tensors.update({f"adam.m/{k}": a.copy() for k, a in adam.m.items()})
    tensors.update({f"adam.v/{k}": a.copy() for k, a in adam.v.items()})
    return Checkpoint(
        model_config=model.config.to_dict(),
        train_config=asdict(cfg),
        tensors=tensors,
        scaler=asdict(scaler),
        adam_t=adam.t,
        scheduler=asdict(sched),
        epoch=epoch,
        best_val=best_val,
        # every random stream is derived from (seed, epoch, purpose)
        rng={"generator": "PCG64", "seed": cfg.seed, "next_epoch": epoch + 1},
    )


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    raise TypeError(f"cannot serialize {type(o)}")


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    meta = {
        "model_config": ckpt.model_config,
        "train_config": ckpt.train_config,
        "scaler": ckpt.scaler,
        "adam_t": ckpt.adam_t,
        "scheduler": ckpt.scheduler,
        "epoch": ckpt.epoch,
        "best_val": ckpt.best_val,
        "rng": ckpt.rng,
    }
    block = json.dumps(meta, sort_keys=True, default=_json_default).encode("utf-8")
    out = io.BytesIO()
    out.write(CHECKPOINT_MAGIC)
    out.write(struct.pack("<II", ckpt.version, len(block)))
    out.write(block)
    out.write(struct.pack("<I", len(ckpt.tensors)))
    for name in sorted(ckpt.tensors):
        arr = np.asarray(ckpt.tensors[name])
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        name_b = name.encode("utf-8")
        dtype_b = le.dtype.str.encode("ascii")
        out.write(struct.pack("<H", len(name_b)) + name_b)
        out.write(struct.pack("<B", len(dtype_b)) + dtype_b)
        out.write(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.write(np.ascontiguousarray(le).tobytes())
    return out.getvalue()


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(checkpoint_bytes(ckpt))
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> Checkpoint:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return parse_checkpoint(data)


def parse_checkpoint(data: bytes) -> Checkpoint:
    if len(data) < 12 or data[:4] != CHECKPOINT_MAGIC:
        raise CorruptFile("not a RegDGCNN checkpoint (bad magic)")
    version, block_len = struct.unpack_from("<II", data, 4)
    if version != CHECKPOINT_VERSION:
        raise VersionMismatch(f"checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    pos = 12
    try:
        meta = json.loads(data[pos : pos + block_len].decode("utf-8"))
        pos += block_len
        (count,) = struct.unpack_from("<I", data, pos)
        pos += 4
        tensors = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", data, pos)
            name = data[pos + 2 : pos + 2 + nlen].decode("utf-8")
            pos += 2 + nlen
            (dlen,) = struct.unpack_from("<B", data, pos)
            dtype = np.dtype(data[pos + 1 : pos + 1 + dlen].decode("ascii"))
            pos += 1 + dlen
            (ndim,) = struct.unpack_from("<B", data, pos)
            shape = struct.unpack_from(f"<{ndim}I", data, pos + 1)
            pos += 1 + 4 * ndim
            nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
            if pos + nbytes > len(data):
                raise CorruptFile(f"tensor {name!r} runs past end of file")
            arr = np.frombuffer(data, dtype=dtype, count=nbytes // dtype.itemsize, offset=pos)
            tensors[name] = arr.reshape(shape).astype(dtype.newbyteorder("="))
            pos += nbytes
    except (struct.error, UnicodeDecodeError, ValueError, TypeError) as exc:
        raise CorruptFile(f"malformed checkpoint: {exc}") from exc
    if pos != len(data):
        raise CorruptFile(f"{len(data) - pos} trailing bytes after tensor directory")
    return Checkpoint(tensors=tensors, version=version, **meta)


# ------------------------------------------------------------------ loops


@contextlib.contextmanager
def single_threaded(enabled: bool = True):
    """Limit BLAS/OpenMP pools to one thread for bitwise-reproducible numerics."""
    if not enabled:
        yield
        return
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=1):
        yield


def predict_ids(model: RegDGCNNModel, dataset: DesignDataset, ids: Sequence[str],
                batch_size: int = 32) -> np.ndarray:
    """Normalized-space predictions in inference mode."""
    was = model.training
    model.eval()
    try:
        out = [
            np.asarray(forward(model, dataset.batch(ids[s : s + batch_size])).data, dtype=np.float64)
            for s in range(0, len(ids), batch_size)
        ]
    finally:
        model.training = was
    return np.concatenate(out) if out else np.zeros(0)


@dataclass
class EpochRecord:
    epoch: int
    train_mse: float
    val_mse: float
    lr: float


def history_csv(history: Sequence[EpochRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "train_mse", "val_mse", "lr"])
    for h in history:
        w.writerow([h.epoch, repr(h.train_mse), repr(h.val_mse), repr(h.lr)])
    return buf.getvalue()


def train(model: RegDGCNNModel, dataset: DesignDataset, cfg: TrainConfig,
          train_ids: Sequence[str] | None = None, resume: Checkpoint | None = None,
          on_epoch: Callable[[Checkpoint, EpochRecord], None] | None = None):
    """Fit ``model`` to the dataset's training split.

    Losses are MSE on z-scored targets (statistics from the training ids).
    Returns ``(model, history, best_checkpoint)``; the model is left at its
    last-epoch state, while the checkpoint holds the lowest validation MSE.
    ``on_epoch`` receives the end-of-epoch state, which ``resume`` accepts
    to continue the same trajectory.
    """
    if train_ids is None:
        train_ids = dataset.split.train
        if cfg.train_fraction_of_train_split < 1.0:
            train_ids = train_subset(train_ids, cfg.train_fraction_of_train_split, cfg.seed)
    train_ids = list(train_ids)
    val_ids = list(dataset.split.validation)
    if not train_ids:
        raise EmptyDataset("training split is empty")
    if not val_ids:
        raise EmptyDataset("validation split is empty")

    with single_threaded(cfg.deterministic):
        scaler = TargetScaler.fit(dataset.y(train_ids))
        sched = PlateauState(cfg.learning_rate, cfg.scheduler_patience, cfg.scheduler_factor,
                             cfg.scheduler_threshold, cfg.min_lr)
        adam = AdamState()
        start, best_val, best = 0, math.inf, None
        if resume is not None:
            _load_state(model, resume)
            adam = resume.adam_state()
            sched = PlateauState(**resume.scheduler)
            scaler = resume.target_scaler()
            start, best_val = resume.epoch + 1, resume.best_val
        history: list[EpochRecord] = []
        y_train = scaler.normalize(dataset.y(train_ids))
        y_lookup = dict(zip(train_ids, y_train))
        val_y = scaler.normalize(dataset.y(val_ids))

        for epoch in range(start, cfg.epochs):
            lr = sched.lr
            order = make_rng(cfg.seed, epoch, 0).permutation(len(train_ids))
            drop_rng = make_rng(cfg.seed, epoch, 1)
            model.train()
            sq_sum = 0.0
            for s in range(0, len(order), cfg.batch_size):
                ids = [train_ids[i] for i in order[s : s + cfg.batch_size]]
                x = dataset.batch(ids)
                y = np.array([y_lookup[i] for i in ids], dtype=model.dtype)
                model.zero_grad()
                try:
                    with Tape(check_finite=True) as tape:
                        loss = mse_loss(forward(model, x, drop_rng), y)
                except NonFiniteError as exc:
                    raise DivergedLoss(f"non-finite activations in epoch {epoch}") from exc
                if not np.isfinite(loss.data):
                    raise DivergedLoss(f"loss became {float(loss.data)} in epoch {epoch}")
                tape.backward(loss)
                adam_step(model.parameters, adam, lr)
                sq_sum += float(loss.data) * len(ids)
            train_mse = sq_sum / len(train_ids)

            val_pred = predict_ids(model, dataset, val_ids, cfg.batch_size)
            val_mse = float(np.mean((val_pred - val_y) ** 2))
            if not math.isfinite(val_mse):
                raise DivergedLoss(f"validation loss became {val_mse} in epoch {epoch}")
            scheduler_step([val_mse], sched)
            record = EpochRecord(epoch, train_mse, val_mse, lr)
            history.append(record)
            log.info("epoch %d train %.6g val %.6g lr %.3g", epoch, train_mse, val_mse, lr)
            if val_mse < best_val:
                best_val = val_mse
                best = make_checkpoint(model, cfg, adam, scaler, sched, epoch, best_val)
            if on_epoch is not None:
                on_epoch(make_checkpoint(model, cfg, adam, scaler, sched, epoch, best_val), record)
    model.eval()
    return model, history, best


def _load_state(model: RegDGCNNModel, ckpt: Checkpoint) -> None:
    for name, p in model.parameters.items():
        p.data = ckpt.tensors[f"param/{name}"].copy()
    for name in model.buffers:
        model.buffers[name] = ckpt.tensors[f"buffer/{name}"].copy()


def evaluate(model: RegDGCNNModel, dataset: DesignDataset, ids: Sequence[str],
             scaler: TargetScaler, batch_size: int = 32) -> dict:
    """MSE, R^2 and mean relative error (%) in de-normalized target units."""
    ids = list(ids)
    if not ids:
        raise EmptyDataset("cannot evaluate an empty split")
    pred = scaler.denormalize(predict_ids(model, dataset, ids, batch_size))
    report = aerometrics.regression_report(dataset.y(ids), pred)
    report["n"] = len(ids)
    return report


@dataclass
class ScalingRow:
    fraction: float
    n_train: int
    mean_rel_err_pct: float
    mse: float
    r2: float


def scaling_rows_csv(rows: Sequence[ScalingRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["fraction", "n_train", "mean_rel_err_pct", "mse", "r2"])
    for r in rows:
        w.writerow([r.fraction, r.n_train, repr(r.mean_rel_err_pct), repr(r.mse), repr(r.r2)])
    return buf.getvalue()


def scaling_study(dataset: DesignDataset, fractions: Sequence[float], cfg: TrainConfig,
                  model_config: RegDGCNNConfig, init_seed: int | None = None,
                  subsets_out: dict | None = None) -> list[ScalingRow]:
    """One independent run per training fraction, all scored on the same test split.

    Subsets are prefixes of a single seeded shuffle of the training split, so
    each smaller subset is contained in every larger one. Metrics come from
    the best-validation checkpoint of each run.
    """
    if not dataset.split.test:
        raise EmptyDataset("scaling study needs a non-empty test split")
    init_seed = cfg.seed if init_seed is None else init_seed
    rows = []
    for frac in sorted(fractions):
        ids = train_subset(dataset.split.train, frac, cfg.seed)
        if subsets_out is not None:
            subsets_out[frac] = list(ids)
        model = init_parameters(model_config, init_seed)
        _, _, best = train(model, dataset, cfg, train_ids=ids)
        report = evaluate(best.model(), dataset, dataset.split.test, best.target_scaler(),
                          cfg.batch_size)
        rows.append(ScalingRow(frac, len(ids), report["mean_rel_err_pct"], report["mse"], report["r2"]))
        log.info("fraction %.2f (n=%d): mean relative error %.3f%%", frac, len(ids),
                 report["mean_rel_err_pct"])
    return rows

