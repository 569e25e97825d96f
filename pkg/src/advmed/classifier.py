"""Small CNN binary classifier: definition, SGD-with-momentum training, checkpoints."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from advmed import container
from advmed import rng as rng_mod
from advmed import tensor as T
from advmed.data import Dataset, LabeledImage
from advmed.tensor import Tape, Tensor

log = logging.getLogger(__name__)

CLASS_COUNT = 2


class TrainingError(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass(frozen=True)
class Architecture:
    input_spec: tuple[int, int, int] = (1, 32, 32)
    conv_channels: tuple[int, ...] = (8, 16, 32)
    hidden: int = 64
    kernel: int = 3
    head: str = "flatten"  # flatten | gap (global average pool)
    # fixed standardization (x - input_mean) / input_std, set from training data
    input_mean: float = 0.0
    input_std: float = 1.0

    def __post_init__(self):
        if self.head not in ("flatten", "gap"):
            raise ValueError(f"head must be 'flatten' or 'gap', got {self.head!r}")
        if self.input_std <= 0:
            raise ValueError(f"input_std must be positive, got {self.input_std}")

    def param_shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        c, h, w = self.input_spec
        shapes = []
        for i, f in enumerate(self.conv_channels):
            shapes.append((f"conv{i + 1}.w", (f, c, self.kernel, self.kernel)))
            shapes.append((f"conv{i + 1}.b", (1, f, 1, 1)))
            c, h, w = f, h // 2, w // 2
        flat = c if self.head == "gap" else c * h * w
        if self.hidden:
            shapes += [("fc1.w", (flat, self.hidden)), ("fc1.b", (1, self.hidden))]
            flat = self.hidden
        shapes += [("out.w", (flat, CLASS_COUNT)), ("out.b", (1, CLASS_COUNT))]
        return shapes

    def describe(self) -> dict:
        d = asdict(self)
        d["layers"] = [f"{name}:{'x'.join(map(str, shape))}" for name, shape in self.param_shapes()]
        return d

    @classmethod
    def from_descriptor(cls, d: dict) -> "Architecture":
        return cls(
            input_spec=tuple(d["input_spec"]),
            conv_channels=tuple(d["conv_channels"]),
            hidden=int(d["hidden"]),
            kernel=int(d["kernel"]),
            head=d.get("head", "flatten"),
            input_mean=float(d.get("input_mean", 0.0)),
            input_std=float(d.get("input_std", 1.0)),
        )


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    momentum: float = 0.9
    epochs: int = 10
    batch_size: int = 4
    rotate: bool = True
    hflip: bool = True
    vflip: bool = True
    mixup: bool = True
    mixup_alpha: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.mixup and not self.mixup_alpha > 0:
            raise ValueError("mixup_alpha must be > 0 when mixup is enabled")


@dataclass
class ClassifierModel:
    arch: Architecture
    params: dict[str, Tensor]
    training_seed: int = 0
    metadata: dict = field(default_factory=dict)

    @property
    def input_spec(self) -> tuple[int, int, int]:
        return self.arch.input_spec

    def forward(self, x: Tensor) -> Tensor:
        """Logits [N, 2]; records on the active tape if x or θ require grad."""
        if x.ndim != 4 or tuple(x.shape[1:]) != self.input_spec:
            raise T.ShapeError(f"expected input N x {self.input_spec}, got {x.shape}")
        p = self.params
        h = x
        if self.arch.input_mean != 0.0 or self.arch.input_std != 1.0:
            h = T.mul(T.add(h, Tensor(-self.arch.input_mean)), 1.0 / self.arch.input_std)
        for i in range(len(self.arch.conv_channels)):
            pad = self.arch.kernel // 2
            h = T.conv2d(h, p[f"conv{i + 1}.w"], stride=1, padding=pad)
            h = T.relu(T.add(h, p[f"conv{i + 1}.b"]))
            h = T.maxpool2x2(h)
        h = T.global_avg_pool(h) if self.arch.head == "gap" else T.flatten(h)
        if self.arch.hidden:
            h = T.relu(T.add(T.matmul(h, p["fc1.w"]), p["fc1.b"]))
        return T.add(T.matmul(h, p["out.w"]), p["out.b"])

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def copy(self) -> "ClassifierModel":
        params = {k: Tensor(v.data.copy(), requires_grad=v.requires_grad) for k, v in self.params.items()}
        return ClassifierModel(self.arch, params, self.training_seed, dict(self.metadata))


def init_model(arch: Architecture | None = None, seed: int = 0) -> ClassifierModel:
    """Glorot-uniform weights from the seed; zero biases."""
    arch = arch or Architecture()
    gen = rng_mod.stream(seed, "init")
    params = {}
    for name, shape in arch.param_shapes():
        if name.endswith(".b"):
            data = np.zeros(shape)
        else:
            if len(shape) == 4:
                rf = shape[2] * shape[3]
                fan_in, fan_out = shape[1] * rf, shape[0] * rf
            else:
                fan_in, fan_out = shape
            limit = math.sqrt(6.0 / (fan_in + fan_out))
            data = gen.uniform(-limit, limit, size=shape)
        params[name] = Tensor(data, requires_grad=True)
    return ClassifierModel(arch, params, seed)


def loss_and_gradients(model: ClassifierModel, x: np.ndarray, y, wrt_input: bool = False,
                       reduction: str = "mean") -> tuple[float, dict[str, np.ndarray], np.ndarray | None]:
    """Cross-entropy loss plus gradients for every parameter and, optionally, the input."""
    xt = Tensor(x, requires_grad=wrt_input)
    for prm in model.parameters():
        prm.zero_grad()
    with Tape() as tape:
        loss = T.cross_entropy(model.forward(xt), y, reduction=reduction)
    tape.backward(loss)
    grads = {k: v.grad for k, v in model.params.items()}
    for prm in model.parameters():
        prm.zero_grad()
    return loss.item(), grads, xt.grad


def input_gradient(model: ClassifierModel, x: np.ndarray, y, reduction: str = "sum") -> tuple[np.ndarray, np.ndarray]:
    """(logits, dL/dx) with parameters frozen."""
    xt = Tensor(x, requires_grad=True)
    with Tape() as tape:
        logits = model.forward(xt)
        loss = T.cross_entropy(logits, y, reduction=reduction)
    tape.backward(loss)
    return logits.data, xt.grad


def logits(model: ClassifierModel, x: np.ndarray, batch: int = 256) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    out = [model.forward(Tensor(x[i : i + batch])).data for i in range(0, len(x), batch)]
    return np.concatenate(out) if out else np.zeros((0, CLASS_COUNT))


def predict(model: ClassifierModel, images, strict: bool = False, batch: int = 256) -> np.ndarray:
    """Softmax probabilities [N, 2]; no tape is recorded."""
    x = images.data if isinstance(images, Tensor) else np.asarray(images, dtype=np.float64)
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4 or tuple(x.shape[1:]) != model.input_spec:
        raise T.ShapeError(f"expected images N x {model.input_spec}, got {x.shape}")
    if strict and (np.any(x < 0) or np.any(x > 1)):
        raise ValueError("pixel values outside [0, 1]")
    return T.softmax_np(logits(model, x, batch))


# ---------------------------------------------------------------------------
# Augmentation


def augment(image: LabeledImage, cfg: TrainConfig, gen: np.random.Generator,
            force: dict | None = None) -> LabeledImage:
    """Random right-angle rotation and flips; ``force`` pins outcomes (keys k, hflip, vflip)."""
    force = force or {}
    px = image.pixels
    if cfg.rotate:
        k = force.get("k", int(gen.integers(0, 4)))
        px = np.rot90(px, k, axes=(1, 2))
    if cfg.hflip and force.get("hflip", gen.random() < 0.5):
        px = px[:, :, ::-1]
    if cfg.vflip and force.get("vflip", gen.random() < 0.5):
        px = px[:, ::-1, :]
    if px is image.pixels:
        return image
    return LabeledImage(np.ascontiguousarray(px), image.label, image.patient_id, image.image_id, image.path)


def _augment_batch(x: np.ndarray, cfg: TrainConfig, gen: np.random.Generator) -> np.ndarray:
    out = np.empty_like(x)
    for i in range(len(x)):
        px = x[i]
        if cfg.rotate:
            px = np.rot90(px, int(gen.integers(0, 4)), axes=(1, 2))
        if cfg.hflip and gen.random() < 0.5:
            px = px[:, :, ::-1]
        if cfg.vflip and gen.random() < 0.5:
            px = px[:, ::-1, :]
        out[i] = px
    return out


def onehot(y, k: int = CLASS_COUNT) -> np.ndarray:
    return np.eye(k)[np.asarray(y, dtype=np.int64)]


def mixup_pair(a: LabeledImage, b: LabeledImage, lam: float) -> tuple[np.ndarray, np.ndarray]:
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"mixup weight must be in [0, 1], got {lam}")
    if a.pixels.shape != b.pixels.shape:
        raise T.ShapeError(f"mixup shapes differ: {a.pixels.shape} vs {b.pixels.shape}")
    img = lam * a.pixels + (1.0 - lam) * b.pixels
    soft = lam * onehot(a.label) + (1.0 - lam) * onehot(b.label)
    return img, soft


# ---------------------------------------------------------------------------
# Training


def accuracy_on(model: ClassifierModel, x: np.ndarray, y: np.ndarray) -> float:
    pred = predict(model, x).argmax(axis=1)
    return float(np.mean(pred == y))


def train(train_set: Dataset, config: TrainConfig, arch: Architecture | None = None,
          eval_set: Dataset | None = None) -> ClassifierModel:
    """SGD with momentum on mean softmax cross-entropy. Deterministic given ``config.seed``."""
    if len(train_set) == 0:
        raise ValueError("empty training set")
    y_all = train_set.y
    if set(y_all.tolist()) != {0, 1}:
        raise ValueError(f"training set must contain both classes, has {sorted(set(y_all.tolist()))}")
    x_all = train_set.x
    if arch is None:
        arch = Architecture(input_spec=tuple(x_all.shape[1:]), input_mean=float(x_all.mean()),
                            input_std=float(x_all.std()))
    model = init_model(arch, config.seed)
    params = model.parameters()
    velocity = [np.zeros_like(p.data) for p in params]
    history = []
    n = len(x_all)
    for epoch in range(config.epochs):
        gen = rng_mod.stream(config.seed, "epoch", epoch)
        order = gen.permutation(n)
        total, seen = 0.0, 0
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            xb = _augment_batch(x_all[idx], config, gen)
            yb = onehot(y_all[idx])
            if config.mixup and len(idx) > 1:
                lam = float(gen.beta(config.mixup_alpha, config.mixup_alpha))
                perm = gen.permutation(len(idx))
                xb = lam * xb + (1.0 - lam) * xb[perm]
                yb = lam * yb + (1.0 - lam) * yb[perm]
            for p in params:
                p.zero_grad()
            with Tape() as tape:
                loss = T.cross_entropy(model.forward(Tensor(xb)), yb)
            if not math.isfinite(loss.item()):
                last = history[-1]["loss"] if history else float("nan")
                raise TrainingError(
                    f"non-finite loss at epoch {epoch}, batch starting {start}; last finite epoch loss {last}"
                )
            tape.backward(loss)
            for p, v in zip(params, velocity):
                v *= config.momentum
                v -= config.learning_rate * p.grad
                p.data += v
                p.zero_grad()
            total += loss.item() * len(idx)
            seen += len(idx)
        entry = {"epoch": epoch + 1, "loss": total / seen}
        if eval_set is not None and len(eval_set):
            entry["eval_accuracy"] = accuracy_on(model, eval_set.x, eval_set.y)
        history.append(entry)
        log.info("epoch %d loss %.6f%s", epoch + 1, entry["loss"],
                 f" eval_acc {entry['eval_accuracy']:.4f}" if "eval_accuracy" in entry else "")
    model.metadata = {"train_config": asdict(config), "history": history}
    return model


# ---------------------------------------------------------------------------
# Checkpoints


def save_model(model: ClassifierModel, path: str | Path) -> str:
    desc = {"kind": "classifier", "param_order": list(model.params), **model.arch.describe()}
    meta = {"training_seed": model.training_seed, **model.metadata}
    return container.write(path, desc, [p.data for p in model.params.values()], meta)


def load_model(path: str | Path) -> ClassifierModel:
    desc, tensors, meta = container.read(path)
    if desc.get("kind") != "classifier":
        raise container.ContainerError(f"{path} is not a classifier checkpoint")
    arch = Architecture.from_descriptor(desc)
    names = desc["param_order"]
    expected = dict(arch.param_shapes())
    params = {}
    for name, arr in zip(names, tensors, strict=True):
        if tuple(arr.shape) != expected[name]:
            raise container.ContainerError(f"{name}: shape {arr.shape} != {expected[name]}")
        params[name] = Tensor(arr, requires_grad=True)
    seed = int(meta.pop("training_seed", 0))
    return ClassifierModel(arch, params, seed, meta)
