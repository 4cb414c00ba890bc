"""Late-fusion multimodal classifier.

Per modality: MLP encoder -> tanh projection to a shared width. Present
projections are averaged (absent modalities contribute nothing), passed
through a two-layer ReLU fusion MLP, and classified by a linear head.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field

import numpy as np

from . import ndnet as nd
from .evaluation import balanced_accuracy
from .ingest import Partition, to_features
from .masks import drop_with_keep_one
from .ndnet import Tape, TrainRecipe, backward, lr_at, sgd_step, softmax, softmax_xent
from .seeding import mix_seed, rng_from

log = logging.getLogger(__name__)

EVAL_BATCH = 1024


@dataclass(frozen=True)
class ModelConfig:
    input_dims: tuple[int, ...]
    n_classes: int
    encoder_hidden: tuple[int, ...] = (256,)
    proj_dim: int = 64
    fusion_hidden: int = 128
    dropout_p: float = 0.1
    moddrop_p: float = 0.3
    dtype: str = "float32"
    center_inputs: bool = True  # map [0, 1] pixels to [-1, 1] before the first layer

    def __post_init__(self):
        if self.n_classes < 2:
            raise ValueError("need at least two classes")
        if not 0 <= self.dropout_p < 1 or not 0 <= self.moddrop_p < 1:
            raise ValueError("dropout probabilities must be in [0, 1)")

    @property
    def n_modalities(self) -> int:
        return len(self.input_dims)

    @property
    def fused_dim(self) -> int:
        return self.fusion_hidden


@dataclass
class FeatureSet:
    """Flattened float features per modality plus presence masks and labels."""

    xs: list[np.ndarray]
    presence: np.ndarray
    labels: np.ndarray
    image_shapes: list[tuple[int, int, int] | None] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "FeatureSet":
        idx = np.asarray(idx, dtype=np.int64)
        return FeatureSet([x[idx] for x in self.xs], self.presence[idx], self.labels[idx], self.image_shapes)

    def with_presence(self, presence) -> "FeatureSet":
        presence = np.broadcast_to(np.asarray(presence, dtype=np.uint8), self.presence.shape).copy()
        return FeatureSet(self.xs, presence, self.labels, self.image_shapes)

    @classmethod
    def from_partition(cls, part: Partition, side: int | None = 16, dtype=np.float32) -> "FeatureSet":
        xs, shapes = [], []
        for x in part.modalities:
            s = side if side is not None and min(x.shape[1:3]) > side else None
            xs.append(to_features(x, s).astype(dtype, copy=False))
            h, w = (s, s) if s else x.shape[1:3]
            shapes.append((h, w, x.shape[3]))
        return cls(xs, part.presence.copy(), np.asarray(part.labels, dtype=np.int64), shapes)


@dataclass
class ForwardOutput:
    logits: nd.Tensor
    fused: nd.Tensor
    projections: list[nd.Tensor]
    presence: np.ndarray


class MultimodalNet:
    def __init__(self, cfg: ModelConfig, seed: int):
        self.cfg = cfg
        dtype = np.dtype(cfg.dtype)
        rng = rng_from(mix_seed(seed, "init"))
        self.encoders: list[list[nd.Tensor]] = []
        for m, d_in in enumerate(cfg.input_dims):
            layers = []
            widths = (d_in,) + tuple(cfg.encoder_hidden)
            for i in range(len(widths) - 1):
                layers += nd.dense_params(rng, widths[i], widths[i + 1], f"enc{m}.h{i}", dtype)
            layers += nd.dense_params(rng, widths[-1], cfg.proj_dim, f"enc{m}.proj", dtype)
            self.encoders.append(layers)
        self.fusion = (nd.dense_params(rng, cfg.proj_dim, cfg.fusion_hidden, "fusion.0", dtype)
                       + nd.dense_params(rng, cfg.fusion_hidden, cfg.fusion_hidden, "fusion.1", dtype))
        self.head = nd.dense_params(rng, cfg.fusion_hidden, cfg.n_classes, "head", dtype)

    @property
    def params(self) -> list[nd.Tensor]:
        return [p for enc in self.encoders for p in enc] + self.fusion + self.head

    def state(self) -> dict[str, np.ndarray]:
        return {p.name: p.data.copy() for p in self.params}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for p in self.params:
            p.data = state[p.name].copy()

    def encode(self, m: int, x: nd.Tensor, train: bool, rng) -> nd.Tensor:
        layers = self.encoders[m]
        h = x
        for i in range(0, len(layers) - 2, 2):
            h = nd.relu(nd.linear(h, layers[i], layers[i + 1]))
        proj = nd.tanh(nd.linear(h, layers[-2], layers[-1]))
        return nd.dropout(proj, self.cfg.dropout_p, rng, train)

    def forward(self, xs: list[np.ndarray], presence: np.ndarray, train: bool = False,
                rng: np.random.Generator | None = None) -> ForwardOutput:
        presence = np.asarray(presence, dtype=np.uint8)
        n = len(presence)
        if np.any(presence == 0):
            raise ValueError("every sample needs at least one present modality")
        dtype = np.dtype(self.cfg.dtype)
        total = None
        projections = []
        count = np.zeros(n, dtype=dtype)
        for m in range(self.cfg.n_modalities):
            here = (presence >> m) & 1 == 1
            idx = np.flatnonzero(here)
            count += here
            if len(idx) == 0:
                projections.append(nd.Tensor(np.zeros((n, self.cfg.proj_dim), dtype=dtype)))
                continue
            x = np.asarray(xs[m][idx], dtype=dtype)
            if self.cfg.center_inputs:
                x = (x - dtype.type(0.5)) * dtype.type(2.0)
            x = nd.Tensor(x)
            proj = nd.scatter_rows(self.encode(m, x, train, rng), idx, n)
            projections.append(proj)
            total = proj if total is None else nd.add(total, proj)
        fusion_in = nd.mul(total, (1.0 / count)[:, None].astype(dtype))
        f = self.fusion
        h = nd.relu(nd.linear(fusion_in, f[0], f[1]))
        fused = nd.relu(nd.linear(h, f[2], f[3]))
        logits = nd.linear(fused, self.head[0], self.head[1])
        if not np.all(np.isfinite(logits.data)):
            raise nd.NonFiniteError("non-finite logits")
        return ForwardOutput(logits, fused, projections, presence)

    # ---------------------------------------------------------------- inference

    def _batched(self, data: FeatureSet, fn):
        outs = []
        for start in range(0, len(data), EVAL_BATCH):
            sl = slice(start, start + EVAL_BATCH)
            outs.append(fn([x[sl] for x in data.xs], data.presence[sl]))
        return outs

    def predict_proba(self, data: FeatureSet) -> np.ndarray:
        outs = self._batched(data, lambda xs, p: softmax(self.forward(xs, p).logits.data))
        return np.concatenate(outs) if outs else np.zeros((0, self.cfg.n_classes))

    def predict(self, data: FeatureSet) -> np.ndarray:
        return self.predict_proba(data).argmax(axis=1)

    def features(self, data: FeatureSet) -> np.ndarray:
        """Penultimate (fused) representation, as used by k-center greedy."""
        outs = self._batched(data, lambda xs, p: self.forward(xs, p).fused.data)
        return np.concatenate(outs) if outs else np.zeros((0, self.cfg.fused_dim))

    def mc_predict(self, data: FeatureSet, T: int, rng: np.random.Generator) -> np.ndarray:
        """T x N x K softmax outputs of stochastic (dropout-on) passes with fixed masks."""
        if T < 1:
            raise ValueError("T must be >= 1")
        out = np.empty((T, len(data), self.cfg.n_classes), dtype=np.dtype(self.cfg.dtype))
        for t in range(T):
            parts = self._batched(data, lambda xs, p: softmax(self.forward(xs, p, train=True, rng=rng).logits.data))
            if parts:
                out[t] = np.concatenate(parts)
        return out

    def badge_embedding(self, data: FeatureSet) -> tuple[np.ndarray, list[np.ndarray]]:
        """Head-gradient embeddings at the argmax pseudo-label.

        Returns the full embedding ``vec((p - e_y) x fused)`` (length K*F, class
        major) and, per modality, ``vec((p - e_y) x proj_m) / n_present`` blocks
        of length K*D (zero for absent modalities).
        """
        full, blocks = [], [[] for _ in range(self.cfg.n_modalities)]

        def one(xs, pres):
            out = self.forward(xs, pres)
            p = softmax(out.logits.data)
            g = p.copy()
            g[np.arange(len(g)), p.argmax(axis=1)] -= 1.0
            full.append((g[:, :, None] * out.fused.data[:, None, :]).reshape(len(g), -1))
            k = np.zeros(len(pres))
            for m in range(self.cfg.n_modalities):
                k += (pres >> m) & 1
            for m, proj in enumerate(out.projections):
                blocks[m].append((g[:, :, None] * proj.data[:, None, :]).reshape(len(g), -1) / k[:, None])

        self._batched(data, one)
        K, F, D = self.cfg.n_classes, self.cfg.fused_dim, self.cfg.proj_dim
        if not full:
            return np.zeros((0, K * F)), [np.zeros((0, K * D)) for _ in blocks]
        return np.concatenate(full), [np.concatenate(b) for b in blocks]


def moddrop(masks: np.ndarray, p_drop: float, rng: np.random.Generator) -> np.ndarray:
    """Drop each present modality with ``p_drop``; at least one always survives."""
    if not 0 <= p_drop < 1:
        raise ValueError("p_drop must be in [0, 1)")
    masks = np.asarray(masks, dtype=np.uint8)
    if p_drop == 0:
        return masks.copy()
    M = int(masks.max()).bit_length() if masks.size else 1
    return drop_with_keep_one(masks, [p_drop] * M, rng)


# ------------------------------------------------------------------ augmentation

def crop_padding(side: int) -> int:
    """Reflect padding for random crops: 4 px at the 32 px reference scale."""
    return max(1, int(round(4 * side / 32)))


def augment_basic(x: np.ndarray, shape: tuple[int, int, int], rng: np.random.Generator) -> np.ndarray:
    """Random horizontal flip (p=0.5) and reflect-padded random crop on flattened images."""
    n = len(x)
    h, w, c = shape
    img = x.reshape(n, h, w, c)
    flip = rng.random(n) < 0.5
    img = np.where(flip[:, None, None, None], img[:, :, ::-1, :], img)
    pad = crop_padding(min(h, w))
    padded = np.pad(img, ((0, 0), (pad, pad), (pad, pad), (0, 0)), mode="reflect")
    dy = rng.integers(0, 2 * pad + 1, size=n)
    dx = rng.integers(0, 2 * pad + 1, size=n)
    rows = dy[:, None] + np.arange(h)[None, :]
    cols = dx[:, None] + np.arange(w)[None, :]
    out = padded[np.arange(n)[:, None, None], rows[:, :, None], cols[:, None, :]]
    return out.reshape(n, -1)


# ---------------------------------------------------------------------- training

@dataclass
class TrainResult:
    model: MultimodalNet
    val_curve: list[float]
    best_epoch: int
    best_val: float
    train_acc: float | None = None


def evaluate(model: MultimodalNet, data: FeatureSet) -> float:
    return balanced_accuracy(model.predict(data), data.labels, model.cfg.n_classes)


def train_model(labeled: FeatureSet, val: FeatureSet, recipe: TrainRecipe, model_cfg: ModelConfig,
                seed: int, use_moddrop: bool = False) -> TrainResult:
    """Train from a fresh initialisation; keep the epoch with best validation balanced accuracy."""
    if len(labeled) == 0 or len(val) == 0:
        raise ValueError("labeled and validation sets must be non-empty")
    model = MultimodalNet(model_cfg, seed)
    rng = rng_from(mix_seed(seed, "train"))
    params = model.params
    n = len(labeled)
    best_state, best_val, best_epoch = None, -1.0, -1
    curve = []
    with np.errstate(over="ignore", invalid="ignore"):
        for epoch in range(recipe.epochs):
            lr = lr_at(epoch, recipe)
            perm = rng.permutation(n)
            for start in range(0, n, recipe.batch_size):
                idx = perm[start:start + recipe.batch_size]
                xs = [x[idx] for x in labeled.xs]
                pres = labeled.presence[idx]
                if recipe.augmentation == "basic":
                    xs = [augment_basic(x, s, rng) if s is not None else x
                          for x, s in zip(xs, labeled.image_shapes)]
                if use_moddrop:
                    pres = moddrop(pres, model_cfg.moddrop_p, rng)
                with Tape() as tape:
                    out = model.forward(xs, pres, train=True, rng=rng)
                    loss, _ = softmax_xent(out.logits, labeled.labels[idx])
                grads = backward(tape, loss, params)
                sgd_step(params, grads, lr, recipe.weight_decay)
            score = evaluate(model, val)
            curve.append(score)
            if score > best_val:
                best_val, best_epoch, best_state = score, epoch, model.state()
    model.load_state(best_state)
    return TrainResult(model, curve, best_epoch, best_val)


@dataclass
class GridResult:
    base_lr: float
    weight_decay: float
    augmentation: str
    trials: list[dict]

    def recipe(self, base: TrainRecipe) -> TrainRecipe:
        return base.with_(base_lr=self.base_lr, weight_decay=self.weight_decay, augmentation=self.augmentation)


def grid_search(initial: FeatureSet, val: FeatureSet, grid: dict, recipe: TrainRecipe,
                model_cfg: ModelConfig, seed: int, use_moddrop: bool = False) -> GridResult:
    """Train one model per (lr, weight decay, augmentation) point; return the best.

    Ties go to the earliest grid point in product order. Candidates that blow
    up numerically score -inf.
    """
    lrs = tuple(grid.get("lr", (recipe.base_lr,)))
    wds = tuple(grid.get("weight_decay", (recipe.weight_decay,)))
    augs = tuple(grid.get("augmentation", (recipe.augmentation,)))
    trials = []
    best = None
    for lr, wd, aug in itertools.product(lrs, wds, augs):
        r = recipe.with_(base_lr=lr, weight_decay=wd, augmentation=aug)
        try:
            score = train_model(initial, val, r, model_cfg, seed, use_moddrop).best_val
        except nd.NonFiniteError:
            score = float("-inf")
        trials.append({"lr": lr, "weight_decay": wd, "augmentation": aug,
                       "val_bacc": score if np.isfinite(score) else None})
        log.debug("grid lr=%g wd=%g aug=%s -> %.4f", lr, wd, aug, score)
        if np.isfinite(score) and (best is None or score > best[0]):
            best = (score, lr, wd, aug)
    if best is None:
        raise nd.NonFiniteError("every grid point diverged")
    return GridResult(best[1], best[2], best[3], trials)
