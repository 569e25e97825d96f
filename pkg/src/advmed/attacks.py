"""L-inf PGD, EOT-trained universal patches, natural patches and transfer attacks.

Models are duck-typed: anything with ``forward(Tensor) -> logits[N, 2]`` and an
``input_spec`` tuple works, so closed-form linear models can be attacked too.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from advmed import rng as rng_mod
from advmed import tensor as T
from advmed.classifier import input_gradient, predict
from advmed.data import Dataset, LabeledImage
from advmed.metrics import evaluate


class AttackError(ValueError):
    pass


def _arr(v) -> np.ndarray:
    return v.data if isinstance(v, T.Tensor) else np.asarray(v, dtype=np.float64)


# ---------------------------------------------------------------------------
# PGD


@dataclass(frozen=True)
class PerturbationBall:
    epsilon: float = 0.02
    norm: str = "linf"

    def __post_init__(self):
        if not self.epsilon >= 0:
            raise AttackError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.norm != "linf":
            raise AttackError(f"only the linf ball is supported, got {self.norm!r}")


@dataclass(frozen=True)
class PgdConfig:
    ball: PerturbationBall = field(default_factory=PerturbationBall)
    iterations: int = 20
    step_size: float | None = None  # None -> 2.5 * epsilon / iterations
    targeted: bool = True
    random_start: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 1:
            raise AttackError(f"iterations must be >= 1, got {self.iterations}")
        if self.step_size is not None and not self.step_size > 0:
            raise AttackError(f"step_size must be > 0, got {self.step_size}")

    @property
    def step(self) -> float:
        if self.step_size is not None:
            return self.step_size
        return 2.5 * self.ball.epsilon / self.iterations


def project_linf(candidate, anchor, ball: PerturbationBall) -> np.ndarray:
    """Clamp into the epsilon box around ``anchor``, then into [0, 1]."""
    c, a = _arr(candidate), _arr(anchor)
    if c.shape != a.shape:
        raise T.ShapeError(f"candidate {c.shape} and anchor {a.shape} differ")
    eps = ball.epsilon
    return np.clip(np.clip(c, a - eps, a + eps), 0.0, 1.0)


def fgsm_step(x, grad, step: float, toward_target: bool) -> np.ndarray:
    """One signed-gradient step: ascend the loss, or descend it toward a target."""
    xa, g = _arr(x), _arr(grad)
    if xa.shape != g.shape:
        raise T.ShapeError(f"x {xa.shape} and grad {g.shape} differ")
    if not step > 0:
        raise AttackError(f"step must be > 0, got {step}")
    direction = -1.0 if toward_target else 1.0
    return xa + direction * step * np.sign(g)


def pgd_batch(model, x: np.ndarray, y: np.ndarray, cfg: PgdConfig, start_index: int = 0) -> np.ndarray:
    """PGD on a batch. Targeted mode pushes each image toward label ``1 - y``."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if cfg.ball.epsilon == 0:
        return x.copy()
    goal = 1 - y if cfg.targeted else y
    adv = x.copy()
    if cfg.random_start:
        eps = cfg.ball.epsilon
        for i in range(len(x)):
            gen = rng_mod.stream(cfg.seed, "pgd-start", start_index + i)
            adv[i] = x[i] + gen.uniform(-eps, eps, size=x[i].shape)
        adv = project_linf(adv, x, cfg.ball)
    for _ in range(cfg.iterations):
        # summed loss keeps each image's gradient independent of its batch mates
        _, g = input_gradient(model, adv, goal, reduction="sum")
        adv = project_linf(fgsm_step(adv, g, cfg.step, cfg.targeted), x, cfg.ball)
    return adv


def pgd_attack(model, image: LabeledImage, cfg: PgdConfig, index: int = 0) -> LabeledImage:
    if tuple(image.pixels.shape) != tuple(model.input_spec):
        raise T.ShapeError(f"image {image.pixels.shape} does not match model input {model.input_spec}")
    adv = pgd_batch(model, image.pixels[None], np.array([image.label]), cfg, start_index=index)[0]
    return LabeledImage(adv, image.label, image.patient_id, image.image_id, image.path)


# ---------------------------------------------------------------------------
# Patches


def patch_side(scale: float, height: int, width: int) -> int:
    return int(math.floor(scale * min(height, width) + 0.5))


@dataclass
class Patch:
    pixels: np.ndarray  # C x s x s
    scale: float = 0.4
    target: int = 1
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if self.pixels.ndim != 3 or self.pixels.shape[1] != self.pixels.shape[2]:
            raise AttackError(f"patch must be C x s x s, got {self.pixels.shape}")
        if not 0.0 < self.scale <= 1.0:
            raise AttackError(f"scale must be in (0, 1], got {self.scale}")
        if self.target not in (0, 1):
            raise AttackError(f"target must be 0 or 1, got {self.target}")

    @property
    def side(self) -> int:
        return self.pixels.shape[1]


@dataclass(frozen=True)
class PlacementTransform:
    row: int
    col: int
    rotation: int = 0  # quarter turns counter-clockwise
    scale: float = 0.4


def _nn_index(n_in: int, n_out: int) -> np.ndarray:
    return np.minimum(((np.arange(n_out) + 0.5) * n_in / n_out).astype(np.int64), n_in - 1)


def placement_map(patch_shape: tuple[int, int, int], placement: PlacementTransform,
                  image_shape: tuple[int, int, int]) -> tuple[tuple[slice, slice], np.ndarray]:
    """Image region written by the patch and, per written pixel, the flat patch index it copies."""
    c, s, _ = patch_shape
    ci, h, w = image_shape
    if ci != c:
        raise T.ShapeError(f"patch has {c} channels, image has {ci}")
    side = patch_side(placement.scale, h, w)
    if side < 1:
        raise AttackError(f"patch side {side} < 1 pixel at scale {placement.scale}")
    r, col = placement.row, placement.col
    if r < 0 or col < 0 or r + side > h or col + side > w:
        raise AttackError(f"placement ({r}, {col}) with side {side} leaves the {h}x{w} image")
    src = np.arange(c * s * s).reshape(c, s, s)
    src = np.rot90(src, placement.rotation % 4, axes=(1, 2))
    nn = _nn_index(s, side)
    src = src[:, nn][:, :, nn]
    return (slice(r, r + side), slice(col, col + side)), src


def apply_patch(image, patch: Patch, placement: PlacementTransform) -> np.ndarray:
    px = image.pixels if isinstance(image, LabeledImage) else _arr(image)
    (rs, cs), src = placement_map(patch.pixels.shape, placement, px.shape)
    out = px.copy()
    out[:, rs, cs] = patch.pixels.reshape(-1)[src]
    return out


def sample_placement(gen: np.random.Generator, scale: float, height: int, width: int) -> PlacementTransform:
    side = patch_side(scale, height, width)
    if side < 1:
        raise AttackError(f"patch side {side} < 1 pixel at scale {scale}")
    row = int(gen.integers(0, height - side + 1))
    col = int(gen.integers(0, width - side + 1))
    return PlacementTransform(row, col, int(gen.integers(0, 4)), scale)


def evaluation_placements(n: int, scale: float, height: int, width: int, seed: int) -> list[PlacementTransform]:
    """One placement per test image, from a per-image stream so order never matters."""
    return [sample_placement(rng_mod.stream(seed, "place", i), scale, height, width) for i in range(n)]


@dataclass(frozen=True)
class PatchConfig:
    scale: float = 0.4
    steps: int = 400
    step_size: float = 0.05
    batch: int = 32
    momentum: float = 0.9
    seed: int = 0


def mean_log_prob(model, x: np.ndarray, target: int) -> float:
    logits = np.concatenate([model.forward(T.Tensor(x[i : i + 256])).data for i in range(0, len(x), 256)])
    return float(T.log_softmax_np(logits)[:, target].mean())


def train_patch(model, train_set: Dataset, target: int, cfg: PatchConfig = PatchConfig()) -> Patch:
    """Gradient ascent on the mean log-probability of ``target`` over random placements."""
    if len(train_set) == 0:
        raise AttackError("empty training set")
    if not 0.0 < cfg.scale <= 1.0:
        raise AttackError(f"scale must be in (0, 1], got {cfg.scale}")
    x_all = train_set.x
    c, h, w = x_all.shape[1:]
    side = patch_side(cfg.scale, h, w)
    if side < 1:
        raise AttackError(f"degenerate patch: side {side} < 1 pixel")
    pixels = np.full((c, side, side), 0.5)
    velocity = np.zeros_like(pixels)
    gen = rng_mod.stream(cfg.seed, "patch-train", target)
    goal = np.full(min(cfg.batch, len(x_all)), target)
    for _ in range(cfg.steps):
        idx = gen.choice(len(x_all), size=len(goal), replace=len(x_all) < len(goal))
        batch = np.empty((len(idx), c, h, w))
        maps = []
        for k, i in enumerate(idx):
            pl = sample_placement(gen, cfg.scale, h, w)
            (rs, cs), src = placement_map(pixels.shape, pl, (c, h, w))
            batch[k] = x_all[i]
            batch[k][:, rs, cs] = pixels.reshape(-1)[src]
            maps.append((rs, cs, src))
        # d(mean log p(target)) = -d(mean cross-entropy toward target)
        _, gx = input_gradient(model, batch, goal, reduction="mean")
        grad = np.zeros(pixels.size)
        for k, (rs, cs, src) in enumerate(maps):
            np.add.at(grad, src.reshape(-1), -gx[k][:, rs, cs].reshape(-1))
        velocity = cfg.momentum * velocity + cfg.step_size * grad.reshape(pixels.shape)
        pixels = np.clip(pixels + velocity, 0.0, 1.0)
    return Patch(pixels, cfg.scale, target, {"seed": cfg.seed, "steps": cfg.steps})


def center_square(px: np.ndarray) -> np.ndarray:
    _, h, w = px.shape
    s = min(h, w)
    r, c = (h - s) // 2, (w - s) // 2
    return px[:, r : r + s, c : c + s]


def natural_patch(model, train_set: Dataset, target: int, scale: float = 0.4) -> Patch:
    """Crop of the training image the model finds most convincingly ``target``."""
    if len(train_set) == 0:
        raise AttackError("empty dataset")
    x = train_set.x
    probs = predict(model, x)[:, target]
    best = int(np.argmax(probs))  # first maximum wins ties
    sq = center_square(x[best])
    side = patch_side(scale, *x.shape[2:])
    nn = _nn_index(sq.shape[1], side)
    pixels = sq[:, nn][:, :, nn]
    return Patch(pixels, scale, target, {"source_image": train_set[best].image_id,
                                         "source_probability": float(probs[best])})


def apply_patches(x: np.ndarray, y: np.ndarray, patches: dict[int, Patch], seed: int) -> np.ndarray:
    """Patch each image with the patch aimed at its wrong label (target ``1 - y``)."""
    n, _, h, w = x.shape
    scale = next(iter(patches.values())).scale
    out = np.empty_like(x)
    for i, pl in enumerate(evaluation_placements(n, scale, h, w, seed)):
        out[i] = apply_patch(x[i], patches[1 - int(y[i])], pl)
    return out


# ---------------------------------------------------------------------------
# Transfer


def transfer_attack(victim, surrogate, x: np.ndarray, y: np.ndarray, kind: str = "pgd",
                    pgd: PgdConfig | None = None, train_set: Dataset | None = None,
                    patch_cfg: PatchConfig | None = None, place_seed: int = 0):
    """Craft on ``surrogate`` only, then score on ``victim``. Returns (adversarial x, victim metrics)."""
    if tuple(victim.input_spec) != tuple(surrogate.input_spec):
        raise AttackError(f"input_spec mismatch: victim {victim.input_spec}, surrogate {surrogate.input_spec}")
    if kind == "pgd":
        adv = pgd_batch(surrogate, x, y, pgd or PgdConfig())
    elif kind == "patch":
        if train_set is None:
            raise AttackError("patch transfer needs the training set")
        pc = patch_cfg or PatchConfig()
        patches = {t: train_patch(surrogate, train_set, t, pc) for t in (0, 1)}
        adv = apply_patches(x, y, patches, place_seed)
    else:
        raise AttackError(f"unknown attack kind {kind!r}")
    return adv, evaluate(predict(victim, adv), y)
