"""
Experiment machinery: configuration, dataset synthesis and storage, fold
splits, training with early stopping, evaluation and the ablation grid.

A dataset is device-major: every device contributes `frames` preambles, and
every preamble is corrupted once per SNR grid point. Each sample keeps the
eight preprocessed symbols of both the noisy input and its clean target, so
any input layout can be built from the same files.
"""
import copy
import json
import logging
import math
import time
from dataclasses import dataclass, asdict, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import torch
from joblib import Parallel, delayed
from scipy import stats
from sklearn.metrics import precision_score, recall_score
from tqdm import tqdm

from .channel import SnrGrid, awgn
from .config import ConfigSource, _deep_merge, build_section, dump_yaml
from .dsp import (
    DEFAULT_SYNC_THRESHOLD, Layout, NormStats, PreambleTensor, SampleTuple,
    apply_norm, fit_norm, layout_array, pad_guard, preprocess,
)
from .errors import DataError
from .impair import DeviceProfile, PopulationSpec, apply_rff, sample_population
from .nn import LossWeights, ModelState, NetworkSpec, derive_seed, predict, train_step, warmup_lr
from .phy import PhyConfig, modulate_preamble

logger = logging.getLogger(__name__)

DATASET_FORMAT = "pscdae-dataset"
DATASET_VERSION = 1
RESULTS_FORMAT = "pscdae-results"
RESULTS_VERSION = 1
SPLIT_FRACTIONS = (0.6, 0.2, 0.2)

# RNG stream tags: SeedSequence([seed, tag, ...])
_SPLIT_STREAM = 1
_SHUFFLE_STREAM = 2
_MODEL_STREAM = 3

TENSOR_FILES = ("symbols_noisy", "symbols_clean", "labels", "snr_db")


@dataclass(frozen=True)
class Variant:
    name: str
    layout: Layout
    denoising: bool


VARIANTS: Dict[str, Variant] = {
    v.name: v for v in (
        Variant("CNN_2", Layout.TWO_SYM, False),
        Variant("CDAE_2", Layout.TWO_SYM, True),
        Variant("CNN_6", Layout.SIX_SYM, False),
        Variant("CDAE_6", Layout.SIX_SYM, True),
        Variant("SCNN_6", Layout.ONE_SYM, False),
        Variant("SCDAE_6", Layout.ONE_SYM, True),
        Variant("CNN_8", Layout.EIGHT_SYM, False),
        Variant("CDAE_8", Layout.EIGHT_SYM, True),
        Variant("PSCNN", Layout.THREE_SYM, False),
        Variant("PSCDAE", Layout.THREE_SYM, True),
    )
}


def get_variant(name: str) -> Variant:
    try:
        return VARIANTS[name]
    except KeyError:
        raise DataError(f"unknown variant {name!r}; valid variants: {', '.join(VARIANTS)}") from None


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

@dataclass
class DatasetConfig:
    frames_per_device_per_snr: int = 60
    snr_grid: list = field(default_factory=lambda: SnrGrid().to_list())
    guard_samples: int = 64
    sync_threshold: float = DEFAULT_SYNC_THRESHOLD
    workers: int = 1
    progress: bool = True

    def __post_init__(self):
        if self.frames_per_device_per_snr < 1:
            raise DataError("frames_per_device_per_snr must be at least 1")
        if self.guard_samples < 0:
            raise DataError("guard_samples must be nonnegative")
        if self.workers < 1:
            raise DataError("workers must be at least 1")
        self.snr_grid = SnrGrid(tuple(self.snr_grid)).to_list()

    @property
    def grid(self) -> SnrGrid:
        return SnrGrid(tuple(self.snr_grid))


@dataclass
class TrainingConfig:
    variant: str = "PSCDAE"
    lambda1: float = 1.0
    lambda2: float = 10.0
    lr: float = 0.001
    batch_size: int = 64
    patience: int = 10
    max_epochs: int = 200
    warmup_epochs: int = 1
    dropout: float = 0.5
    l2: float = 0.001
    folds: int = 5
    filters: int = 128
    dense_units: int = 1024
    threads: int = 1
    precision: str = "float32"
    record_timing: bool = False

    def __post_init__(self):
        get_variant(self.variant)
        LossWeights(self.lambda1, self.lambda2)
        if self.batch_size < 1 or self.patience < 1 or self.max_epochs < 1:
            raise DataError("batch_size, patience and max_epochs must be at least 1")
        if self.warmup_epochs < 0:
            raise DataError("warmup_epochs must be nonnegative")
        if self.folds < 1:
            raise DataError("folds must be at least 1")
        if self.precision not in ("float32", "float64"):
            raise DataError(f"precision must be float32 or float64, got {self.precision!r}")

    @property
    def dtype(self) -> torch.dtype:
        return torch.float64 if self.precision == "float64" else torch.float32


@dataclass
class ExperimentConfig:
    seed: int = 0
    population: PopulationSpec = field(default_factory=PopulationSpec)
    phy: PhyConfig = field(default_factory=PhyConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)

    @property
    def variant(self) -> Variant:
        return get_variant(self.training.variant)

    @property
    def snr_grid(self) -> SnrGrid:
        return self.dataset.grid

    def loss_weights(self, variant: Optional[Variant] = None) -> LossWeights:
        variant = variant or self.variant
        return LossWeights(self.training.lambda1 if variant.denoising else 0.0, self.training.lambda2)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "population": self.population.to_dict(),
            "phy": self.phy.to_dict(),
            "dataset": asdict(self.dataset),
            "training": asdict(self.training),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        return config_from_source(ConfigSource(data, {}, "<dict>"))

    def override(self, **changes) -> "ExperimentConfig":
        """Copy with CLI-style overrides (seed, devices, frames, folds, snr_grid, variant, epochs)."""
        cfg = copy.deepcopy(self)
        if changes.get("seed") is not None:
            cfg.seed = changes["seed"]
            cfg.population.seed = changes["seed"]
        if changes.get("devices") is not None:
            cfg.population.n_devices = changes["devices"]
        if changes.get("frames") is not None:
            cfg.dataset = DatasetConfig(**{**asdict(cfg.dataset), "frames_per_device_per_snr": changes["frames"]})
        if changes.get("snr_grid") is not None:
            cfg.dataset = DatasetConfig(**{**asdict(cfg.dataset), "snr_grid": list(changes["snr_grid"])})
        training = {}
        for key, target in (("folds", "folds"), ("variant", "variant"), ("epochs", "max_epochs")):
            if changes.get(key) is not None:
                training[target] = changes[key]
        if training:
            cfg.training = TrainingConfig(**{**asdict(cfg.training), **training})
        return cfg


_SECTIONS = {"population": PopulationSpec, "phy": PhyConfig, "dataset": DatasetConfig, "training": TrainingConfig}


def config_from_source(source: ConfigSource) -> ExperimentConfig:
    values = _deep_merge(ExperimentConfig().to_dict(), source.data)
    for key in values:
        if key != "seed" and key not in _SECTIONS:
            raise source.error((key,), f"unknown section {key!r}")
    seed = values["seed"]
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        raise source.error(("seed",), f"seed must be a nonnegative integer, got {seed!r}")
    sections = {name: build_section(cls, values[name], source, (name,)) for name, cls in _SECTIONS.items()}
    return ExperimentConfig(seed=seed, **sections)


def load_config(path: Optional[Union[str, Path]] = None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    return config_from_source(ConfigSource.from_path(path))


def reference_config_text() -> str:
    header = "# PSCDAE workbench reference configuration (every default spelled out)\n"
    return header + dump_yaml(ExperimentConfig().to_dict())


def desk_profile() -> ExperimentConfig:
    """
    Reference population and dataset with a 16-filter, 128-unit network.

    One fold per variant and at most 20 epochs, so the ten-variant ablation
    over three seeds fits in an hour on a single core. Matches `desk.yaml`.
    """
    cfg = ExperimentConfig()
    cfg.dataset = DatasetConfig(**{**asdict(cfg.dataset), "progress": False})
    cfg.training = TrainingConfig(**{**asdict(cfg.training), "folds": 1, "filters": 16,
                                     "dense_units": 128, "max_epochs": 20})
    return cfg


# ---------------------------------------------------------------------------
# Dataset
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Splits:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray

    def __post_init__(self):
        held_out = np.union1d(self.train, self.val)
        if np.intersect1d(held_out, self.test).size or np.intersect1d(self.train, self.val).size:
            raise DataError("split partitions overlap")

    def __getitem__(self, name: str) -> np.ndarray:
        if name not in ("train", "val", "test"):
            raise DataError(f"unknown split {name!r}")
        return getattr(self, name)


def make_splits(n: int, fold: int, seed: int, fractions: Sequence[float] = SPLIT_FRACTIONS) -> Splits:
    """Disjoint 60/20/20 train/val/test indices, re-drawn for every fold."""
    if n < 3:
        raise DataError(f"need at least 3 samples to split, got {n}")
    rng = np.random.default_rng(np.random.SeedSequence([seed, _SPLIT_STREAM, fold]))
    perm = rng.permutation(n)
    n_train = max(1, int(round(fractions[0] * n)))
    n_val = max(1, int(round(fractions[1] * n)))
    while n_train + n_val >= n:
        n_train -= 1
    return Splits(
        train=np.sort(perm[:n_train]),
        val=np.sort(perm[n_train:n_train + n_val]),
        test=np.sort(perm[n_train + n_val:]),
    )


@dataclass
class Dataset:
    noisy: np.ndarray          # (N, 8, S, 2)
    clean: np.ndarray          # (N, 8, S, 2)
    labels: np.ndarray         # (N,) int
    snr_db: np.ndarray         # (N,)
    manifest: dict
    norms: Dict[Tuple[str, int], NormStats] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def n_classes(self) -> int:
        return int(self.manifest["population"]["n_devices"])

    @property
    def samples_per_symbol(self) -> int:
        return int(self.noisy.shape[2])

    @property
    def seed(self) -> int:
        return int(self.manifest["seed"])

    def splits(self, fold: int) -> Splits:
        return make_splits(len(self), fold, self.seed)

    def norm_stats(self, layout: Layout, fold: int) -> NormStats:
        """Min/max of the noisy training inputs of `fold`; never sees val or test."""
        key = (Layout(layout).value, fold)
        if key not in self.norms:
            train = self.splits(fold).train
            self.norms[key] = fit_norm(layout_array(self.noisy[train], layout))
        return self.norms[key]

    def tensors(self, layout: Layout, fold: int, split: str):
        """Normalised (z, z_hat, one-hot y, labels, snr) for one split."""
        idx = self.splits(fold)[split]
        if idx.size == 0:
            raise DataError(f"split {split!r} of fold {fold} is empty")
        stats_ = self.norm_stats(layout, fold)
        z = apply_norm(layout_array(self.noisy[idx], layout), stats_)
        z_hat = apply_norm(layout_array(self.clean[idx], layout), stats_)
        labels = self.labels[idx]
        return z, z_hat, np.eye(self.n_classes)[labels], labels, self.snr_db[idx]

    def sample_tuples(self, layout: Layout, fold: int, split: str) -> List[SampleTuple]:
        z, z_hat, y, _, snr = self.tensors(layout, fold, split)
        spc = self.samples_per_symbol
        return [
            SampleTuple(PreambleTensor(z[k], layout, spc), PreambleTensor(z_hat[k], layout, spc), y[k], float(snr[k]))
            for k in range(len(z))
        ]


@dataclass(frozen=True)
class _DeviceJob:
    device_index: int
    profile: DeviceProfile
    frames: int
    snr_grid: tuple
    seed: int
    phy: PhyConfig
    guard: int
    threshold: float


def _synthesize_device(job: _DeviceJob):
    """All frames x SNR points of one device; returns (rows, dropped)."""
    template = modulate_preamble(job.phy)
    rows, dropped = [], []
    for frame in range(job.frames):
        rng = np.random.default_rng(np.random.SeedSequence([job.seed, job.device_index, frame]))
        impaired = apply_rff(job.profile, template, rng, job.phy)
        padded = pad_guard(impaired, int(rng.integers(0, job.guard + 1)), job.guard)
        try:
            clean = preprocess(padded, template, job.phy, job.threshold).astype(np.float32)
        except DataError as e:
            dropped.append({"device": job.profile.device_id, "frame": frame, "snr_db": None,
                            "reason": str(e)})
            continue
        power = impaired.power()
        for k, snr in enumerate(job.snr_grid):
            noise_rng = np.random.default_rng(np.random.SeedSequence([job.seed, job.device_index, frame, k]))
            noisy = awgn(padded, snr, noise_rng, reference_power=power)
            try:
                z = preprocess(noisy, template, job.phy, job.threshold)
            except DataError as e:
                dropped.append({"device": job.profile.device_id, "frame": frame, "snr_db": snr,
                                "reason": str(e)})
                continue
            rows.append((job.device_index, snr, z.astype(np.float32), clean))
    return rows, dropped


def generate_dataset(cfg: ExperimentConfig, progress: Optional[bool] = None) -> Dataset:
    """
    Synthesize the full device x frame x SNR dataset and fit the per-fold
    normalisation of every variant layout on its training split.
    """
    profiles = sample_population(cfg.population)
    grid = cfg.snr_grid
    ds_cfg = cfg.dataset
    jobs = [
        _DeviceJob(k, p, ds_cfg.frames_per_device_per_snr, tuple(grid), cfg.seed, cfg.phy,
                   ds_cfg.guard_samples, ds_cfg.sync_threshold)
        for k, p in enumerate(profiles)
    ]
    show = ds_cfg.progress if progress is None else progress
    logger.info("Synthesizing %d devices x %d frames x %d SNR points",
                len(jobs), ds_cfg.frames_per_device_per_snr, len(grid))
    results = Parallel(n_jobs=ds_cfg.workers)(
        delayed(_synthesize_device)(j) for j in tqdm(jobs, desc="devices", disable=not show))

    rows = [row for device_rows, _ in results for row in device_rows]
    dropped = [d for _, device_dropped in results for d in device_dropped]
    if not rows:
        raise DataError("every frame failed synchronisation; nothing to store")
    if dropped:
        logger.warning("%d frame(s) dropped after failed synchronisation", len(dropped))

    labels = np.array([r[0] for r in rows], dtype=np.int64)
    snr = np.array([r[1] for r in rows], dtype=np.float32)
    frame_counts = {p.device_id: {str(s): 0 for s in grid} for p in profiles}
    for device, s, _, _ in rows:
        frame_counts[profiles[device].device_id][str(s)] += 1

    manifest = {
        "format": DATASET_FORMAT,
        "version": DATASET_VERSION,
        "seed": cfg.seed,
        "config": cfg.to_dict(),
        "population": cfg.population.to_dict(),
        "profiles": [p.to_dict() for p in profiles],
        "snr_grid": grid.to_list(),
        "frame_counts": frame_counts,
        "n_samples": len(rows),
        "folds": cfg.training.folds,
        "dropped": dropped,
    }
    dataset = Dataset(
        noisy=np.stack([r[2] for r in rows]),
        clean=np.stack([r[3] for r in rows]),
        labels=labels,
        snr_db=snr,
        manifest=manifest,
    )
    if len(dataset) >= 3:
        layouts = sorted({v.layout.value for v in VARIANTS.values()})
        for fold in range(cfg.training.folds):
            for layout in layouts:
                dataset.norm_stats(Layout(layout), fold)
    logger.info("Dataset ready: %d samples, %d dropped", len(dataset), len(dropped))
    return dataset


def _write_f32(path: Path, arr: np.ndarray) -> List[int]:
    try:
        np.ascontiguousarray(arr, dtype="<f4").tofile(str(path))
    except OSError as e:
        raise DataError(f"cannot write {path}: {e.strerror}") from e
    return list(arr.shape)


def _read_f32(path: Path, shape: Sequence[int]) -> np.ndarray:
    if not path.is_file():
        raise DataError(f"missing tensor file {path}")
    expected = int(np.prod(shape)) * 4
    actual = path.stat().st_size
    if actual != expected:
        raise DataError(f"{path.name}: {actual} bytes on disk, shape {list(shape)} needs {expected}")
    return np.fromfile(str(path), dtype="<f4").reshape(shape)


def write_dataset(dataset: Dataset, out_dir: Union[str, Path]) -> Path:
    """Raw little-endian float32 tensors plus manifest.json."""
    out = Path(out_dir)
    try:
        (out / "norm").mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DataError(f"cannot create {out}: {e.strerror}") from e
    arrays = {
        "symbols_noisy": dataset.noisy,
        "symbols_clean": dataset.clean,
        "labels": dataset.labels,
        "snr_db": dataset.snr_db,
    }
    manifest = dict(dataset.manifest)
    manifest["tensors"] = {
        name: {"file": f"{name}.f32", "shape": _write_f32(out / f"{name}.f32", arr), "dtype": "<f4"}
        for name, arr in arrays.items()
    }
    norm = {}
    for (layout, fold), stats_ in sorted(dataset.norms.items()):
        rel = f"norm/{layout}_fold{fold}.f32"
        norm[f"{layout}_fold{fold}"] = {"file": rel, "shape": _write_f32(out / rel, stats_.to_array()),
                                        "layout": layout, "fold": fold}
    manifest["norm"] = norm
    try:
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    except OSError as e:
        raise DataError(f"cannot write manifest: {e.strerror}") from e
    logger.info("Wrote %d samples to %s", len(dataset), out)
    return out


def load_dataset(path: Union[str, Path]) -> Dataset:
    root = Path(path)
    try:
        manifest = json.loads((root / "manifest.json").read_text(encoding="utf-8"))
    except OSError as e:
        raise DataError(f"cannot read manifest in {root}: {e.strerror}") from e
    except json.JSONDecodeError as e:
        raise DataError(f"manifest in {root} is not valid JSON: {e}") from e
    if manifest.get("format") != DATASET_FORMAT or manifest.get("version") != DATASET_VERSION:
        raise DataError(f"{root} is not a {DATASET_FORMAT} v{DATASET_VERSION} directory")
    tensors = manifest.get("tensors", {})
    missing = [name for name in TENSOR_FILES if name not in tensors]
    if missing:
        raise DataError(f"manifest lacks tensors: {', '.join(missing)}")
    arrays = {name: _read_f32(root / tensors[name]["file"], tensors[name]["shape"]) for name in TENSOR_FILES}
    n = arrays["labels"].shape[0]
    if any(arrays[name].shape[0] != n for name in TENSOR_FILES):
        raise DataError("tensor files disagree on the sample count")
    labels = arrays["labels"].astype(np.int64)
    if not np.array_equal(labels, arrays["labels"]):
        raise DataError("labels must be integral")
    norms = {}
    for entry in manifest.get("norm", {}).values():
        norms[(entry["layout"], int(entry["fold"]))] = NormStats.from_array(
            _read_f32(root / entry["file"], entry["shape"]))
    return Dataset(arrays["symbols_noisy"], arrays["symbols_clean"], labels, arrays["snr_db"], manifest, norms)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

class EarlyStopping:
    """Stop once validation accuracy has not improved for `patience` epochs."""

    def __init__(self, patience: int = 10):
        self.patience = patience
        self.best_score = -np.inf
        self.best_epoch: Optional[int] = None
        self.stale_epochs = 0

    def update(self, epoch: int, score: float) -> bool:
        if score > self.best_score:
            self.best_score = score
            self.best_epoch = epoch
            self.stale_epochs = 0
            return True
        self.stale_epochs += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.stale_epochs >= self.patience


@dataclass
class TrainingLog:
    variant: str
    fold: int
    epochs: List[dict] = field(default_factory=list)
    best_epoch: Optional[int] = None
    best_val_accuracy: Optional[float] = None
    stopped_early: bool = False
    wall_clock_s: Optional[float] = None

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainingLog":
        return cls(**data)


@dataclass
class TrainResult:
    state: ModelState
    variant: Variant
    fold: int
    log: TrainingLog


def configure_torch(threads: int = 1) -> None:
    torch.set_num_threads(threads)
    torch.use_deterministic_algorithms(True)


def network_spec(cfg: ExperimentConfig, n_classes: int, samples_per_symbol: int, variant: Variant) -> NetworkSpec:
    tr = cfg.training
    return NetworkSpec(
        input_length=variant.layout.length(samples_per_symbol),
        n_classes=n_classes,
        filters=tr.filters,
        dense_units=tr.dense_units,
        dropout=tr.dropout,
        with_decoder=variant.denoising,
    )


def accuracy(predicted: np.ndarray, labels: np.ndarray) -> float:
    if len(labels) == 0:
        raise DataError("cannot score an empty set")
    return 100.0 * float(np.mean(np.asarray(predicted) == np.asarray(labels)))


def _capture(state: ModelState) -> dict:
    return {
        "parameters": state.snapshot(),
        "optimizer": copy.deepcopy(state.optimizer.state_dict()),
        "dropout_rng": state.dropout_rng.get_state(),
    }


def _restore(state: ModelState, captured: dict) -> None:
    state.restore(captured["parameters"])
    state.optimizer.load_state_dict(captured["optimizer"])
    state.dropout_rng.set_state(captured["dropout_rng"])


def train_model(cfg: ExperimentConfig, dataset: Dataset, fold: int = 0,
                variant: Optional[Union[str, Variant]] = None, progress: bool = False) -> TrainResult:
    """
    Train one variant on one fold; returns the best-validation parameters.

    Batches are drawn in a per-epoch order seeded from (seed, fold, epoch),
    so two runs with the same seed and thread count are identical.
    """
    variant = variant if isinstance(variant, Variant) else get_variant(variant or cfg.training.variant)
    tr = cfg.training
    configure_torch(tr.threads)
    dtype_np = np.float64 if tr.dtype == torch.float64 else np.float32

    z_tr, zh_tr, y_tr, _, _ = dataset.tensors(variant.layout, fold, "train")
    z_va, _, _, lab_va, _ = dataset.tensors(variant.layout, fold, "val")
    z_tr, zh_tr, y_tr, z_va = (a.astype(dtype_np) for a in (z_tr, zh_tr, y_tr, z_va))

    spec = network_spec(cfg, dataset.n_classes, dataset.samples_per_symbol, variant)
    state = ModelState(spec, seed=derive_seed(cfg.seed, _MODEL_STREAM, fold), dtype=tr.dtype, lr=tr.lr)
    weights = cfg.loss_weights(variant)
    stopper = EarlyStopping(tr.patience)
    log = TrainingLog(variant=variant.name, fold=fold)
    best = _capture(state)
    batch_index = 0
    warmup_steps = tr.warmup_epochs * math.ceil(len(z_tr) / tr.batch_size)
    started = time.perf_counter()

    logger.info("Training %s fold %d: %d train / %d val samples, input %dx2",
                variant.name, fold, len(z_tr), len(z_va), spec.input_length)
    for epoch in tqdm(range(1, tr.max_epochs + 1), desc=f"{variant.name}/{fold}", disable=not progress):
        order = np.random.default_rng(np.random.SeedSequence([cfg.seed, _SHUFFLE_STREAM, fold, epoch])).permutation(len(z_tr))
        totals = np.zeros(3)
        for start in range(0, len(order), tr.batch_size):
            idx = order[start:start + tr.batch_size]
            lr = warmup_lr(tr.lr, batch_index, warmup_steps)
            terms = train_step(state, z_tr[idx], zh_tr[idx], y_tr[idx], weights, lr, tr.l2, batch_index)
            totals += len(idx) * np.array([terms.total.item(), terms.mse.item(), terms.cce.item()])
            batch_index += 1
        loss, mse, cce = totals / len(order)
        val_acc = accuracy(predict(state, z_va).argmax(axis=1), lab_va)
        if stopper.update(epoch, val_acc):
            best = _capture(state)
        log.epochs.append({"epoch": epoch, "loss": float(loss), "mse": float(mse), "cce": float(cce),
                           "val_accuracy": val_acc})
        logger.debug("Epoch %d/%d, Avg Loss: %.4f (mse %.4f, cce %.4f), val acc %.2f%%",
                     epoch, tr.max_epochs, loss, mse, cce, val_acc)
        if stopper.should_stop:
            log.stopped_early = True
            break

    _restore(state, best)
    log.best_epoch = stopper.best_epoch
    log.best_val_accuracy = float(stopper.best_score)
    if tr.record_timing:
        log.wall_clock_s = time.perf_counter() - started
    logger.info("%s fold %d: best val acc %.2f%% at epoch %d of %d",
                variant.name, fold, log.best_val_accuracy, log.best_epoch, len(log.epochs))
    return TrainResult(state, variant, fold, log)


# ---------------------------------------------------------------------------
# Evaluation and reporting
# ---------------------------------------------------------------------------

METRICS = ("accuracy", "precision", "recall")


@dataclass
class FoldMetrics:
    """Per-SNR percentages for one fold; None where the split holds no sample at that SNR."""
    fold: int
    split: str
    snr_grid: List[float]
    accuracy: List[Optional[float]]
    precision: List[Optional[float]]
    recall: List[Optional[float]]
    overall_accuracy: float

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "FoldMetrics":
        return cls(**data)


def score_predictions(predicted: np.ndarray, labels: np.ndarray, snr_db: np.ndarray,
                      snr_grid: SnrGrid, fold: int = 0, split: str = "test") -> FoldMetrics:
    if len(labels) == 0:
        raise DataError(f"split {split!r} is empty")
    per = {m: [] for m in METRICS}
    for snr in snr_grid:
        mask = np.isclose(snr_db, snr)
        if not mask.any():
            for m in METRICS:
                per[m].append(None)
            continue
        y_true, y_pred = labels[mask], predicted[mask]
        per["accuracy"].append(accuracy(y_pred, y_true))
        per["precision"].append(100.0 * float(precision_score(y_true, y_pred, average="macro", zero_division=0)))
        per["recall"].append(100.0 * float(recall_score(y_true, y_pred, average="macro", zero_division=0)))
    return FoldMetrics(fold, split, snr_grid.to_list(), per["accuracy"], per["precision"], per["recall"],
                       accuracy(predicted, labels))


def confidence_interval(values: Iterable[Optional[float]], level: float = 0.95) -> Tuple[Optional[float], Optional[float]]:
    """Mean and Student-t half-width over folds; half-width 0 for a single fold."""
    v = np.array([x for x in values if x is not None], dtype=np.float64)
    if v.size == 0:
        return None, None
    if v.size < 2:
        return float(v.mean()), 0.0
    half = stats.t.ppf(0.5 + level / 2.0, v.size - 1) * stats.sem(v)
    return float(v.mean()), float(half)


def aggregate_folds(folds: Sequence[FoldMetrics]) -> Dict[str, Dict[str, list]]:
    if not folds:
        raise DataError("no folds to aggregate")
    grid = folds[0].snr_grid
    if any(f.snr_grid != grid for f in folds):
        raise DataError("folds were scored on different SNR grids")
    summary = {}
    for metric in METRICS:
        means, halves = [], []
        for k in range(len(grid)):
            mean, half = confidence_interval(getattr(f, metric)[k] for f in folds)
            means.append(mean)
            halves.append(half)
        summary[metric] = {"mean": means, "ci95": halves}
    return summary


@dataclass
class ExperimentRecord:
    variant: str
    snr_grid: List[float]
    folds: List[FoldMetrics]
    training: List[TrainingLog] = field(default_factory=list)

    @property
    def summary(self) -> Dict[str, Dict[str, list]]:
        return aggregate_folds(self.folds)

    @property
    def wall_clock_s(self) -> Optional[float]:
        times = [t.wall_clock_s for t in self.training if t.wall_clock_s is not None]
        return float(sum(times)) if times else None

    def merge(self, other: "ExperimentRecord") -> "ExperimentRecord":
        if other.variant != self.variant or other.snr_grid != self.snr_grid:
            raise DataError(f"cannot merge {other.variant} records into {self.variant}")
        return ExperimentRecord(self.variant, self.snr_grid, self.folds + other.folds, self.training + other.training)

    def to_dict(self) -> dict:
        return {
            "format": RESULTS_FORMAT,
            "version": RESULTS_VERSION,
            "variant": self.variant,
            "snr_grid": self.snr_grid,
            "summary": self.summary,
            "wall_clock_s": self.wall_clock_s,
            "folds": [f.to_dict() for f in self.folds],
            "training": [t.to_dict() for t in self.training],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentRecord":
        if data.get("format") != RESULTS_FORMAT or data.get("version") != RESULTS_VERSION:
            raise DataError(f"not a {RESULTS_FORMAT} v{RESULTS_VERSION} record")
        return cls(data["variant"], data["snr_grid"], [FoldMetrics.from_dict(f) for f in data["folds"]],
                   [TrainingLog.from_dict(t) for t in data.get("training", [])])

    def save(self, path: Union[str, Path]) -> None:
        try:
            Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        except OSError as e:
            raise DataError(f"cannot write {path}: {e.strerror}") from e

    @classmethod
    def load(cls, path: Union[str, Path]) -> "ExperimentRecord":
        try:
            return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
        except OSError as e:
            raise DataError(f"cannot read {path}: {e.strerror}") from e
        except (json.JSONDecodeError, KeyError, TypeError) as e:
            raise DataError(f"{path} is not a valid record: {e}") from e


def evaluate(state: ModelState, dataset: Dataset, variant: Union[str, Variant], fold: int = 0,
             split: str = "test", log: Optional[TrainingLog] = None) -> ExperimentRecord:
    """Score a trained model on one split, per SNR point."""
    variant = variant if isinstance(variant, Variant) else get_variant(variant)
    if state.spec.input_length != variant.layout.length(dataset.samples_per_symbol):
        raise DataError(f"model input length {state.spec.input_length} does not fit the {variant.layout.value} layout")
    if state.spec.n_classes != dataset.n_classes:
        raise DataError(f"model has {state.spec.n_classes} classes, dataset has {dataset.n_classes}")
    z, _, _, labels, snr = dataset.tensors(variant.layout, fold, split)
    predicted = predict(state, z).argmax(axis=1)
    grid = SnrGrid(tuple(dataset.manifest["snr_grid"]))
    metrics = score_predictions(predicted, labels, snr, grid, fold, split)
    return ExperimentRecord(variant.name, grid.to_list(), [metrics], [log] if log else [])


def run_variant(cfg: ExperimentConfig, dataset: Dataset, variant: Union[str, Variant],
                folds: Optional[Iterable[int]] = None, progress: bool = False) -> ExperimentRecord:
    record = None
    for fold in (folds if folds is not None else range(cfg.training.folds)):
        result = train_model(cfg, dataset, fold, variant, progress)
        scored = evaluate(result.state, dataset, result.variant, fold, "test", result.log)
        record = scored if record is None else record.merge(scored)
    if record is None:
        raise DataError("no folds to run")
    return record


@dataclass
class AblationTable:
    records: Dict[str, ExperimentRecord]

    def __post_init__(self):
        if not self.records:
            raise DataError("an ablation table needs at least one record")
        grids = {tuple(r.snr_grid) for r in self.records.values()}
        if len(grids) != 1:
            raise DataError("records were scored on different SNR grids")

    @classmethod
    def from_records(cls, records: Iterable[ExperimentRecord]) -> "AblationTable":
        merged: Dict[str, ExperimentRecord] = {}
        for record in records:
            merged[record.variant] = merged[record.variant].merge(record) if record.variant in merged else record
        order = [name for name in VARIANTS if name in merged] + [n for n in merged if n not in VARIANTS]
        return cls({name: merged[name] for name in order})

    @property
    def snr_grid(self) -> List[float]:
        return next(iter(self.records.values())).snr_grid

    def to_frame(self) -> pd.DataFrame:
        """Long table: one row per (variant, SNR, metric)."""
        rows = []
        for name, record in self.records.items():
            summary = record.summary
            for metric in METRICS:
                for snr, mean, half in zip(record.snr_grid, summary[metric]["mean"], summary[metric]["ci95"]):
                    rows.append({"variant": name, "snr_db": snr, "metric": metric, "mean": mean, "ci95": half,
                                 "folds": len(record.folds)})
        return pd.DataFrame(rows, columns=["variant", "snr_db", "metric", "mean", "ci95", "folds"])

    def wide(self, metric: str = "accuracy") -> pd.DataFrame:
        """SNR x variant table of means."""
        frame = self.to_frame()
        frame = frame[frame["metric"] == metric]
        table = frame.pivot(index="snr_db", columns="variant", values="mean")
        return table[list(self.records)]

    def write(self, out_dir: Union[str, Path], plot: bool = False) -> List[Path]:
        out = Path(out_dir)
        try:
            out.mkdir(parents=True, exist_ok=True)
        except OSError as e:
            raise DataError(f"cannot create {out}: {e.strerror}") from e
        written = []
        for name, frame, index in (("results.csv", self.to_frame(), False),
                                   ("accuracy_vs_snr.csv", self.wide("accuracy"), True)):
            path = out / name
            try:
                with open(path, "w", encoding="utf-8", newline="") as fh:
                    fh.write(f"# {RESULTS_FORMAT} v{RESULTS_VERSION}\n")
                    frame.to_csv(fh, index=index, float_format="%.4f")
            except OSError as e:
                raise DataError(f"cannot write {path}: {e.strerror}") from e
            written.append(path)
        summary = {
            "format": RESULTS_FORMAT,
            "version": RESULTS_VERSION,
            "snr_grid": self.snr_grid,
            "variants": {name: r.to_dict() for name, r in self.records.items()},
        }
        if "PSCDAE" in self.records and "CNN_8" in self.records:
            summary["gain_pscdae_over_cnn_8"] = baseline_gain(self, "PSCDAE", "CNN_8")
        path = out / "summary.json"
        try:
            path.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        except OSError as e:
            raise DataError(f"cannot write {path}: {e.strerror}") from e
        written.append(path)
        if plot:
            written.append(self.plot(out / "accuracy_vs_snr.png"))
        return written

    def plot(self, path: Union[str, Path]) -> Path:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        markers = {"two_sym": "s", "six_sym": "^", "one_sym": "v", "eight_sym": "D", "three_sym": "o"}
        fig, ax = plt.subplots(figsize=(7, 4.5))
        wide = self.wide("accuracy")
        for name in wide.columns:
            variant = VARIANTS.get(name)
            style = "-" if variant is None or variant.denoising else "--"
            marker = markers.get(variant.layout.value, "x") if variant else "x"
            ax.plot(wide.index, wide[name], linestyle=style, marker=marker, label=name)
        ax.set_xlabel("SNR (dB)")
        ax.set_ylabel("Accuracy (%)")
        ax.grid(True, alpha=0.3)
        ax.legend(ncol=2, fontsize="small")
        fig.tight_layout()
        try:
            fig.savefig(str(path), dpi=120)
        except OSError as e:
            raise DataError(f"cannot write {path}: {e.strerror}") from e
        finally:
            plt.close(fig)
        return Path(path)


def baseline_gain(table: AblationTable, variant: str, baseline: str) -> Dict[str, Optional[float]]:
    """Per-SNR mean accuracy difference variant - baseline, in points."""
    for name in (variant, baseline):
        if name not in table.records:
            raise DataError(f"variant {name} is not in the table")
    a = table.records[variant].summary["accuracy"]["mean"]
    b = table.records[baseline].summary["accuracy"]["mean"]
    return {str(snr): (x - y if x is not None and y is not None else None)
            for snr, x, y in zip(table.snr_grid, a, b)}


def run_ablation(cfg: ExperimentConfig, variants: Optional[Sequence[str]] = None,
                 dataset: Optional[Dataset] = None, progress: bool = False) -> AblationTable:
    """Every variant x fold on one shared dataset."""
    names = list(variants) if variants else list(VARIANTS)
    for name in names:
        get_variant(name)
    if dataset is None:
        dataset = generate_dataset(cfg, progress)
    records = {}
    for name in names:
        records[name] = run_variant(cfg, dataset, name, progress=progress)
        acc = records[name].summary["accuracy"]["mean"]
        logger.info("%s: accuracy %s", name,
                    ", ".join(f"{s:g}dB={a:.1f}" for s, a in zip(records[name].snr_grid, acc) if a is not None))
    return AblationTable(records)
