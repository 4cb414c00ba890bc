"""Builders for the four pitfall-isolating bimodal datasets.

* missing  - shape shared by both QuintFeatures modalities, modality A dropped far more often
* share    - CIFAR-10 image paired with an MNIST digit through a class bijection
* unique   - label = 10 * shape + texture of A; B only sees the shape
* synergy  - label = 10 * texture of A + shape of B; neither modality alone suffices
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ingest import DatasetBundle, Partition
from .masks import drop_with_keep_one, full_mask
from .quintfeatures import FACTORS, GenConfig, QuintSpec, Tie, render, sample_spec, spec_seeds
from .seeding import mix_seed, rng_from

PARTITIONS = ("train", "test")

SUBSET_NAMES = {
    "missing": {"A": "Rare", "B": "Frequent", "AB": "Both"},
    "share": {"A": "CIFAR-10", "B": "MNIST", "AB": "Both"},
    "unique": {"A": "Full", "B": "Partial", "AB": "Both"},
    "synergy": {"A": "Partial A", "B": "Partial B", "AB": "Both"},
}
PARTIAL_SUBSETS = {"missing": [], "share": [], "unique": ["B"], "synergy": ["A", "B"]}
WEAK_SUBSET = {"missing": "A", "share": "A", "unique": "B", "synergy": "B"}


@dataclass(frozen=True)
class MissingnessPolicy:
    p_missing: tuple[float, ...] = (0.9, 0.1)
    keep_one_rule: bool = True

    def __post_init__(self):
        if any(not 0.0 <= p <= 1.0 for p in self.p_missing):
            raise ValueError(f"missing probabilities must be in [0, 1]: {self.p_missing}")
        if not self.keep_one_rule:
            raise ValueError("keep_one_rule cannot be disabled")


@dataclass(frozen=True)
class ClassBijection:
    perm: tuple[int, ...]
    seed: int | None = None

    def __post_init__(self):
        if sorted(self.perm) != list(range(len(self.perm))):
            raise ValueError(f"not a bijection: {self.perm}")

    @classmethod
    def identity(cls, n: int = 10) -> "ClassBijection":
        return cls(tuple(range(n)))

    @classmethod
    def from_seed(cls, seed: int, n: int = 10) -> "ClassBijection":
        return cls(tuple(int(v) for v in rng_from(mix_seed(seed, "bijection")).permutation(n)), seed)

    def __call__(self, c):
        return np.asarray(self.perm)[c]


def apply_missingness(masks: np.ndarray, policy: MissingnessPolicy, rng: np.random.Generator,
                      return_raw: bool = False):
    """Per-modality Bernoulli drops; if every modality would go, keep a random one.

    With ``return_raw`` the boolean pre-repair drop matrix is returned too.
    """
    return drop_with_keep_one(masks, policy.p_missing, rng, return_raw=return_raw)


def _render_stack(specs: list[QuintSpec], cfg: GenConfig) -> np.ndarray:
    out = np.empty((len(specs), cfg.canvas, cfg.canvas, 3), dtype=np.uint8)
    for i, s in enumerate(specs):
        out[i] = render(s, cfg).pixels
    return out


def _quint_pairs(kind: str, n: int, seed: int, partition: str):
    specs_a, specs_b, labels = [], [], np.empty(n, dtype=np.int64)
    for i in range(n):
        rng = rng_from(mix_seed(seed, partition, i, "spec"))
        ea, ja = spec_seeds(seed, partition, i, 0)
        eb, jb = spec_seeds(seed, partition, i, 1)
        a = sample_spec({}, rng, ea, ja)
        if kind in ("missing", "unique"):
            b = sample_spec({"shape_id": Tie(a)}, rng, eb, jb)
        else:
            b = sample_spec({}, rng, eb, jb)
        if kind == "missing":
            labels[i] = a.shape_id
        elif kind == "unique":
            labels[i] = 10 * a.shape_id + a.fg_texture_id
        elif kind == "synergy":
            labels[i] = 10 * a.fg_texture_id + b.shape_id
        else:
            raise ValueError(kind)
        specs_a.append(a)
        specs_b.append(b)
    return specs_a, specs_b, labels


def quint_specs(kind: str, n: int, seed: int, partition: str = "train"):
    """Specs and labels without rendering; cheap enough for large statistical checks."""
    return _quint_pairs(kind, n, seed, partition)


def _factor_array(specs_a, specs_b) -> np.ndarray:
    arr = np.empty((len(specs_a), 2, len(FACTORS)), dtype=np.uint8)
    for i, (a, b) in enumerate(zip(specs_a, specs_b)):
        arr[i, 0] = a.factors()
        arr[i, 1] = b.factors()
    return arr


LABEL_SEMANTICS = {
    "missing": "shape (shared by A and B)",
    "unique": "10*shapeAB + fg_textureA",
    "synergy": "10*fg_textureA + shapeB",
}


def _build_quint(kind: str, gen_cfg: GenConfig, sizes: dict, seed: int,
                 policy: MissingnessPolicy | None = None) -> DatasetBundle:
    cfg = GenConfig(canvas=gen_cfg.canvas, n_samples=int(sum(sizes.values())), seed=seed,
                    erosion=gen_cfg.erosion)
    parts = {}
    stats = {}
    for name in PARTITIONS:
        n = int(sizes.get(name, 0))
        sa, sb, labels = _quint_pairs(kind, n, seed, name)
        presence = full_mask(n, 2)
        if policy is not None and name != "test":
            presence, raw = apply_missingness(presence, policy, rng_from(mix_seed(seed, name, "missing")),
                                              return_raw=True)
            stats[name] = {
                "raw_missing_rate": [float(r) for r in raw.mean(axis=0)] if n else [0.0, 0.0],
                "missing_rate": [float(1 - ((presence >> m) & 1).mean()) if n else 0.0 for m in range(2)],
            }
        parts[name] = Partition(
            modalities=[_render_stack(sa, cfg), _render_stack(sb, cfg)],
            labels=labels,
            presence=presence,
            aux={"factors": _factor_array(sa, sb)},
        )
    n_classes = 10 if kind == "missing" else 100
    manifest = {
        "dataset_kind": kind,
        "n_modalities": 2,
        "n_classes": n_classes,
        "label_semantics": LABEL_SEMANTICS[kind],
        "modalities": [
            {"name": "A", "source": "quintfeatures", "shape": [cfg.canvas, cfg.canvas, 3], "dtype": "uint8"},
            {"name": "B", "source": "quintfeatures", "shape": [cfg.canvas, cfg.canvas, 3], "dtype": "uint8"},
        ],
        "generator": {"quintfeatures": cfg.to_dict(), "factor_order": list(FACTORS)},
        "seed": seed,
        "subset_names": SUBSET_NAMES[kind],
        "partial_subsets": PARTIAL_SUBSETS[kind],
        "weak_subset": WEAK_SUBSET[kind],
    }
    if policy is not None:
        manifest["missingness"] = {"p_missing": list(policy.p_missing), "keep_one_rule": True,
                                   "applies_to": ["train"], "stats": stats}
    return DatasetBundle(manifest=manifest, partitions=parts)


def build_missing(gen_cfg: GenConfig, policy: MissingnessPolicy, sizes: dict, seed: int) -> DatasetBundle:
    return _build_quint("missing", gen_cfg, sizes, seed, policy)


def build_unique(gen_cfg: GenConfig, sizes: dict, seed: int) -> DatasetBundle:
    return _build_quint("unique", gen_cfg, sizes, seed)


def build_synergy(gen_cfg: GenConfig, sizes: dict, seed: int) -> DatasetBundle:
    return _build_quint("synergy", gen_cfg, sizes, seed)


def _pair_share(cifar_labels, mnist_labels, bijection, n, rng):
    if n > len(cifar_labels):
        raise ValueError(f"requested {n} samples but only {len(cifar_labels)} CIFAR images available")
    ci = np.sort(rng.permutation(len(cifar_labels))[:n])
    ci = rng.permutation(ci)
    mi = np.empty(n, dtype=np.int64)
    replaced = 0
    for c in range(len(bijection.perm)):
        rows = np.flatnonzero(cifar_labels[ci] == c)
        pool = np.flatnonzero(mnist_labels == bijection.perm[c])
        if len(rows) == 0:
            continue
        if len(pool) == 0:
            raise ValueError(f"no MNIST images of digit {bijection.perm[c]}")
        order = rng.permutation(pool)
        if len(rows) <= len(order):
            mi[rows] = order[: len(rows)]
        else:
            extra = len(rows) - len(order)
            mi[rows] = np.concatenate([order, rng.choice(pool, size=extra, replace=True)])
            replaced += extra
    return ci, mi, replaced


def build_share(mnist: dict, cifar: dict, bijection: ClassBijection, sizes: dict, seed: int) -> DatasetBundle:
    """``mnist`` / ``cifar`` map partition name to (images, labels) source arrays."""
    parts = {}
    with_replacement = {}
    for name in PARTITIONS:
        n = int(sizes.get(name, 0))
        c_img, c_lab = cifar[name]
        m_img, m_lab = mnist[name]
        rng = rng_from(mix_seed(seed, name, "share"))
        ci, mi, replaced = _pair_share(np.asarray(c_lab), np.asarray(m_lab), bijection, n, rng)
        with_replacement[name] = replaced
        m_img = np.asarray(m_img)
        if m_img.ndim == 3:
            m_img = m_img[..., None]
        parts[name] = Partition(
            modalities=[np.asarray(c_img)[ci], m_img[mi]],
            labels=np.asarray(c_lab)[ci].astype(np.int64),
            presence=full_mask(n, 2),
            aux={"sources": np.stack([ci, mi], axis=1).astype(np.int32),
                 "source_labels": np.stack([np.asarray(c_lab)[ci], np.asarray(m_lab)[mi]], axis=1).astype(np.uint8)},
        )
    manifest = {
        "dataset_kind": "share",
        "n_modalities": 2,
        "n_classes": 10,
        "label_semantics": "cifar_class; mnist digit = bijection[cifar_class]",
        "modalities": [
            {"name": "A", "source": "cifar10", "shape": [32, 32, 3], "dtype": "uint8"},
            {"name": "B", "source": "mnist", "shape": [28, 28, 1], "dtype": "uint8"},
        ],
        "generator": {"bijection": list(bijection.perm), "bijection_seed": bijection.seed,
                      "pairing": "uniform without replacement within class, fixed at build time",
                      "with_replacement_draws": with_replacement},
        "seed": seed,
        "subset_names": SUBSET_NAMES["share"],
        "partial_subsets": [],
        "weak_subset": WEAK_SUBSET["share"],
    }
    return DatasetBundle(manifest=manifest, partitions=parts)


BUILDERS = ("missing", "share", "unique", "synergy")
