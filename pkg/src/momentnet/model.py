"""Model assembly, training/eval loops, finetune masking, checkpoints."""

from __future__ import annotations

import hashlib
import io
import json
import struct
import time
import zlib
from dataclasses import dataclass, field, asdict

import numpy as np

from . import data as datamod
from . import tensor as T
from .blocks import Level1Block, Level2Block, PatchEmbed, make_grid
from .errors import ConfigError, ContractViolation, FormatError, NumericsError
from .nn import BatchNorm2d, Conv2d, Linear, ResidualBlock
from .tensor import Tensor

CHECKPOINT_MAGIC = b"DGMC"
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    levels: int = 2
    channels: int = 32
    image_kernel: int = 3
    patch_size: int | None = None
    num_classes: int = 5
    input_h: int = 32
    input_w: int = 32
    variant: str = "dgm"
    affine_enabled: bool = True

    def validate(self) -> None:
        if self.levels < 1:
            raise ConfigError(f"levels must be >= 1, got {self.levels}")
        if self.channels < 1:
            raise ConfigError("channels must be positive")
        if self.image_kernel not in (1, 3):
            raise ConfigError(f"image_kernel must be 1 or 3, got {self.image_kernel}")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if self.variant not in ("dgm", "baseline"):
            raise ConfigError(f"unknown variant '{self.variant}'")
        if self.patch_size is not None:
            if self.patch_size < 1 or self.input_h % self.patch_size or self.input_w % self.patch_size:
                raise ConfigError("patch_size must divide the input dims")
        gh, gw = self.grid_dims()
        if gh < 2 or gw < 2:
            raise ConfigError("feature grid must be at least 2x2")

    def grid_dims(self) -> tuple[int, int]:
        p = self.patch_size or 1
        return self.input_h // p, self.input_w // p

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        cfg = cls(**d)
        cfg.validate()
        return cfg


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    train_acc: float
    eval_acc: float
    lr: float
    wall_s: float


@dataclass
class TrainReport:
    epochs: list[EpochStats] = field(default_factory=list)

    def to_csv(self) -> str:
        lines = ["epoch,loss,train_acc,eval_acc,lr"]
        for e in self.epochs:
            lines.append(f"{e.epoch},{e.train_loss!r},{e.train_acc!r},{e.eval_acc!r},{e.lr!r}")
        return "\n".join(lines) + "\n"

    @property
    def final_eval_acc(self) -> float:
        return self.epochs[-1].eval_acc if self.epochs else float("nan")


@dataclass
class Hyper:
    epochs: int = 50
    batch_size: int = 32
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    augment: bool = False
    stop_at_eval_acc: float | None = None


def _module_rng(seed: int, name: str) -> np.random.Generator:
    # Name-keyed streams: the same module name gets the same weights for a
    # given seed, independent of construction order or sibling modules.
    return np.random.default_rng([seed, zlib.crc32(name.encode())])


class Model:
    def __init__(self, config: ModelConfig, seed: int):
        config.validate()
        self.config = config
        self.seed = seed
        self.trained_steps = 0
        self.frozen_image_pipeline = False
        c = config.channels

        self.patch_embed = None
        if config.patch_size is not None:
            self.patch_embed = PatchEmbed(3, c, config.patch_size, _module_rng(seed, "patch"), name="patch")
            stem_in = c
        else:
            stem_in = 3
        self.stem_conv = Conv2d(stem_in, c, 3, _module_rng(seed, "stem.conv"), name="stem.conv")
        self.stem_bn = BatchNorm2d(c, name="stem.bn")

        self.level1 = None
        self.level2 = []
        self.res_blocks = []
        if config.variant == "dgm":
            self.level1 = Level1Block(c, _module_rng(seed, "levels.0"), name="levels.0")
            for i in range(1, config.levels):
                rng = _module_rng(seed, f"levels.{i}")
                self.level2.append(Level2Block(c, config.image_kernel, rng,
                                               affine_enabled=config.affine_enabled, name=f"levels.{i}"))
        else:
            for i in range(1, config.levels):
                rng = _module_rng(seed, f"levels.{i}")
                self.res_blocks.append(ResidualBlock(c, config.image_kernel, rng, name=f"levels.{i}.res"))
        self.classifier = Linear(c, config.num_classes, _module_rng(seed, "classifier"), name="classifier")

    # -- module partitions ---------------------------------------------------

    def image_modules(self) -> list:
        mods = []
        if self.patch_embed is not None:
            mods.append(self.patch_embed)
        mods += [self.stem_conv, self.stem_bn]
        if self.config.variant == "dgm":
            mods += [blk.resblock for blk in self.level2]
        else:
            mods += list(self.res_blocks)
        return mods

    def coordinate_modules(self) -> list:
        mods = []
        if self.level1 is not None:
            mods.append(self.level1.generator)
        for blk in self.level2:
            mods.append(blk.generator)
            if blk.predictor is not None:
                mods.append(blk.predictor)
        return mods

    def all_modules(self) -> list:
        return self.image_modules() + self.coordinate_modules() + [self.classifier]

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return [pair for m in self.all_modules() for pair in m.named_parameters()]

    def named_stats(self) -> list[tuple[str, np.ndarray]]:
        return [pair for m in self.all_modules() for pair in m.named_stats()]

    def parameter_count(self) -> int:
        return sum(p.data.size for _, p in self.named_parameters())

    # -- forward --------------------------------------------------------------

    def forward(self, images: np.ndarray, training: bool = False, trace: list | None = None) -> Tensor:
        """images: (B, 3, H, W) in [0, 1] -> logits (B, num_classes)."""
        if images.ndim != 4 or images.shape[1] != 3 or images.shape[2:] != (self.config.input_h, self.config.input_w):
            raise ContractViolation(
                f"expected Bx3x{self.config.input_h}x{self.config.input_w} images, got {images.shape}")
        image_training = training and not self.frozen_image_pipeline
        x = Tensor(images, name="input")
        if self.patch_embed is not None:
            x = self.patch_embed(x)
        x = T.relu(self.stem_bn(self.stem_conv(x), image_training))
        grid = make_grid(*self.config.grid_dims())

        if self.config.variant == "baseline":
            for blk in self.res_blocks:
                x = blk(x, image_training)
            pooled = T.global_mean_pool(x)
            return self.classifier(pooled)

        x, moments = self.level1.forward(x, grid, training, trace)
        for blk in self.level2:
            x, moments = blk.forward(x, moments, grid, training, trace,
                                     image_training=image_training)
        return self.classifier(moments)


def build(config: ModelConfig, seed: int) -> Model:
    return Model(config, seed)


def loss_and_metrics(logits: Tensor, labels: np.ndarray) -> tuple[Tensor, float]:
    loss = T.softmax_cross_entropy(logits, labels)
    preds = np.argmax(logits.data, axis=1)  # ties break to the lowest index
    return loss, float(np.mean(preds == labels))


def evaluate(model: Model, dataset, batch_size: int = 64) -> float:
    correct = 0
    with T.no_grad():
        for lo in range(0, len(dataset), batch_size):
            batch = dataset.images[lo : lo + batch_size]
            logits = model.forward(batch, training=False)
            correct += int(np.sum(np.argmax(logits.data, axis=1) == dataset.labels[lo : lo + batch_size]))
    return correct / len(dataset)


def _diagnose_non_finite(model: Model) -> None:
    for name, p in model.named_parameters():
        if not np.all(np.isfinite(p.data)):
            T.clear_graph()
            raise NumericsError(f"non-finite values first appeared in parameter '{name}'")
    node = T.first_non_finite()
    T.clear_graph()
    if node is not None:
        raise NumericsError(f"non-finite values first appeared in op '{node.name}' with shape {node.data.shape}")
    raise NumericsError("loss is non-finite but no offending tensor was found")


def _batch_slices(n: int, batch_size: int) -> list[slice]:
    slices = [slice(lo, min(n, lo + batch_size)) for lo in range(0, n, batch_size)]
    # batch-norm needs >= 2 samples per train batch; fold a trailing singleton
    if len(slices) > 1 and slices[-1].stop - slices[-1].start == 1:
        slices[-2:] = [slice(slices[-2].start, slices[-1].stop)]
    return slices


def train(model: Model, train_set, eval_set, hyper: Hyper, seed: int,
          trainable: list[str] | None = None) -> TrainReport:
    """Deterministic SGD training; returns per-epoch stats.

    ``trainable`` restricts optimization (and gradient flow) to the named
    parameters; everything else is left bit-identical.
    """
    from .optim import SGD

    if len(train_set) == 0:
        raise ContractViolation("training set is empty")
    n = len(train_set)
    slices = _batch_slices(n, hyper.batch_size)
    total_steps = hyper.epochs * len(slices)

    params = model.named_parameters()
    if trainable is not None:
        wanted = set(trainable)
        for _, p in params:
            p.requires_grad = p.name in wanted
        params = [(name, p) for name, p in params if name in wanted]
    opt = SGD(params, hyper.lr, total_steps, hyper.momentum, hyper.weight_decay)

    report = TrainReport()
    step = 0
    for epoch in range(1, hyper.epochs + 1):
        t0 = time.perf_counter()
        order = np.random.default_rng([seed, 17, epoch]).permutation(n)
        aug_rng = np.random.default_rng([seed, 29, epoch])
        loss_sum = 0.0
        acc_sum = 0.0
        last_lr = 0.0
        for sl in slices:
            idx = order[sl]
            images = train_set.images[idx]
            labels = train_set.labels[idx]
            if hyper.augment:
                images = np.stack([datamod.augment(im, datamod.AugmentPolicy(), aug_rng) for im in images])
            logits = model.forward(images, training=True)
            loss, acc = loss_and_metrics(logits, labels)
            if not np.isfinite(loss.data):
                _diagnose_non_finite(model)
            loss_sum += float(loss.data) * len(idx)
            acc_sum += acc * len(idx)
            T.backward(loss)
            last_lr = opt.step(step)
            step += 1
        eval_acc = evaluate(model, eval_set) if len(eval_set) else float("nan")
        report.epochs.append(EpochStats(
            epoch=epoch,
            train_loss=loss_sum / n,
            train_acc=acc_sum / n,
            eval_acc=eval_acc,
            lr=last_lr,
            wall_s=time.perf_counter() - t0,
        ))
        model.trained_steps += len(slices)
        if hyper.stop_at_eval_acc is not None and eval_acc >= hyper.stop_at_eval_acc:
            break
    return report


# -- finetuning ----------------------------------------------------------------


def finetune_mask(model: Model) -> tuple[list[str], list[str]]:
    """(trainable, frozen) parameter names: coordinate pipeline + classifier
    train, the image-feature pipeline stays frozen."""
    if model.config.variant != "dgm":
        raise ConfigError("finetuning applies to the dgm variant only")
    trainable = [name for m in model.coordinate_modules() for name, _ in m.named_parameters()]
    trainable += [name for name, _ in model.classifier.named_parameters()]
    frozen = [name for m in model.image_modules() for name, _ in m.named_parameters()]
    return trainable, frozen


def frozen_checksum(model: Model) -> str:
    """SHA-256 over the frozen parameters and their running stats."""
    h = hashlib.sha256()
    for m in model.image_modules():
        for name, p in m.named_parameters():
            h.update(name.encode())
            h.update(p.data.tobytes())
        for name, s in m.named_stats():
            h.update(name.encode())
            h.update(s.tobytes())
    return h.hexdigest()


def prepare_finetune(model: Model, num_classes: int, seed: int) -> tuple[list[str], list[str]]:
    """Re-initialize the classifier for a new label set, freeze the image
    pipeline (parameters and batch-norm stats), and return the mask."""
    model.classifier = Linear(model.config.channels, num_classes, _module_rng(seed, "classifier"), name="classifier")
    model.config.num_classes = num_classes
    trainable, frozen = finetune_mask(model)
    model.frozen_image_pipeline = True
    return trainable, frozen


def reinit_coordinate_pipeline(model: Model, seed: int) -> None:
    """Redraw generator/predictor weights and reset their BN stats; the
    control arm for finetune comparisons."""
    c = model.config.channels
    if model.level1 is not None:
        model.level1 = Level1Block(c, _module_rng(seed, "levels.0"), name="levels.0")
    for i, blk in enumerate(model.level2, start=1):
        rng = _module_rng(seed, f"levels.{i}")
        fresh = Level2Block(c, model.config.image_kernel, rng,
                            affine_enabled=blk.predictor is not None, name=f"levels.{i}")
        blk.generator = fresh.generator
        blk.predictor = fresh.predictor


# -- checkpoints ----------------------------------------------------------------


def _write_entry(buf: io.BytesIO, name: str, arr: np.ndarray) -> None:
    raw = name.encode()
    buf.write(struct.pack("<I", len(raw)))
    buf.write(raw)
    buf.write(struct.pack("<I", arr.ndim))
    for d in arr.shape:
        buf.write(struct.pack("<Q", d))
    buf.write(np.ascontiguousarray(arr, dtype=np.float64).tobytes())


def save(model: Model, path) -> None:
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    cfg = json.dumps(model.config.to_dict(), sort_keys=True).encode()
    buf.write(struct.pack("<I", len(cfg)))
    buf.write(cfg)
    buf.write(struct.pack("<Q", model.trained_steps))
    params = model.named_parameters()
    stats = model.named_stats()
    buf.write(struct.pack("<I", len(params)))
    for name, p in params:
        _write_entry(buf, name, p.data)
    buf.write(struct.pack("<I", len(stats)))
    for name, s in stats:
        _write_entry(buf, name, s)
    with open(path, "wb") as f:
        f.write(buf.getvalue())


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.off = 0

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.blob):
            raise FormatError("checkpoint file is truncated")
        out = self.blob[self.off : self.off + n]
        self.off += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]


def _read_entries(r: _Reader) -> dict[str, np.ndarray]:
    out = {}
    count = r.u32()
    for _ in range(count):
        name = r.take(r.u32()).decode()
        rank = r.u32()
        if rank > 8:
            raise FormatError(f"implausible tensor rank {rank}")
        dims = tuple(r.u64() for _ in range(rank))
        size = int(np.prod(dims)) if dims else 1
        arr = np.frombuffer(r.take(size * 8), dtype="<f8").reshape(dims).copy()
        out[name] = arr
    return out


def load(path, expected_config: ModelConfig | None = None) -> Model:
    with open(path, "rb") as f:
        blob = f.read()
    r = _Reader(blob)
    if r.take(4) != CHECKPOINT_MAGIC:
        raise FormatError("not a model checkpoint (bad magic)")
    version = r.u32()
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    try:
        cfg_dict = json.loads(r.take(r.u32()).decode())
        config = ModelConfig.from_dict(cfg_dict)
    except (ValueError, TypeError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise FormatError(f"checkpoint config block is invalid: {exc}") from exc
    if expected_config is not None and config.to_dict() != expected_config.to_dict():
        raise ConfigError(
            f"checkpoint config {config.to_dict()} does not match the requested config {expected_config.to_dict()}")
    trained_steps = r.u64()
    params = _read_entries(r)
    stats = _read_entries(r)
    if r.off != len(blob):
        raise FormatError("trailing bytes after checkpoint payload")

    model = Model(config, seed=0)
    model.trained_steps = trained_steps
    for name, p in model.named_parameters():
        if name not in params:
            raise FormatError(f"checkpoint is missing parameter '{name}'")
        if params[name].shape != p.data.shape:
            raise FormatError(f"parameter '{name}' has shape {params[name].shape}, expected {p.data.shape}")
        p.data = params[name]
    for name, s in model.named_stats():
        if name not in stats:
            raise FormatError(f"checkpoint is missing running stats '{name}'")
        if stats[name].shape != s.shape:
            raise FormatError(f"stats '{name}' have shape {stats[name].shape}, expected {s.shape}")
        s[...] = stats[name]
    return model
