"""Synthetic captioning corpus with controllable noise.

Scenes are small sets of attributed objects; the clean caption is a fixed
template over the objects, and region features are one-hot attribute blocks
with optional Gaussian jitter.  Noise operators corrupt only the caption
(mismatch, word deletion, shuffling, insertion) while features always reflect
the true scene, so ground-truth noise flags stay meaningful.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

COLORS = ("red", "blue", "green", "yellow", "purple", "orange", "black", "white")
SHAPES = ("circle", "square", "triangle", "star", "hexagon", "diamond")
SIZES = ("small", "medium", "large")

FEATURE_DIM = len(COLORS) + len(SHAPES) + len(SIZES)
MAX_OBJECTS = 4

_TEMPLATE_WORDS = sorted(set(COLORS) | set(SHAPES) | set(SIZES) | {"a", "and"})


@dataclass(frozen=True)
class SceneObject:
    color: int
    shape: int
    size: int


@dataclass(frozen=True)
class Scene:
    objects: tuple[SceneObject, ...]


@dataclass
class NoiseConfig:
    p_mismatch: float = 0.3
    p_delete: float = 0.1
    p_shuffle: float = 0.1
    p_insert: float = 0.1
    sigma_feature: float = 0.05

    def __post_init__(self):
        for name in ("p_mismatch", "p_delete", "p_shuffle", "p_insert"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {v}")
        if self.sigma_feature < 0.0:
            raise ValueError("sigma_feature must be non-negative")

    def to_dict(self) -> dict:
        return {
            "p_mismatch": self.p_mismatch,
            "p_delete": self.p_delete,
            "p_shuffle": self.p_shuffle,
            "p_insert": self.p_insert,
            "sigma_feature": self.sigma_feature,
        }


CLEAN_NOISE = NoiseConfig(0.0, 0.0, 0.0, 0.0, 0.0)


@dataclass
class CorpusRecord:
    id: int
    features: np.ndarray  # (objects, FEATURE_DIM)
    caption: str
    noisy: bool
    noise_ops: list[str] = field(default_factory=list)


def template_caption(scene: Scene) -> str:
    """Deterministic clean caption: 'a {size} {color} {shape}' phrases joined by 'and'."""
    return " and ".join(
        f"a {SIZES[o.size]} {COLORS[o.color]} {SHAPES[o.shape]}" for o in scene.objects
    )


def object_features(obj: SceneObject) -> np.ndarray:
    vec = np.zeros(FEATURE_DIM)
    vec[obj.color] = 1.0
    vec[len(COLORS) + obj.shape] = 1.0
    vec[len(COLORS) + len(SHAPES) + obj.size] = 1.0
    return vec


def scene_features(scene: Scene, rng: np.random.Generator, sigma: float) -> np.ndarray:
    feats = np.stack([object_features(o) for o in scene.objects])
    if sigma > 0.0:
        feats = feats + rng.normal(0.0, sigma, size=feats.shape)
    return feats


def scene_from_features(features: np.ndarray) -> Scene:
    """Recover the scene by per-block argmax; exact when jitter is small."""
    feats = np.asarray(features)
    nc, ns = len(COLORS), len(SHAPES)
    objects = tuple(
        SceneObject(
            color=int(np.argmax(row[:nc])),
            shape=int(np.argmax(row[nc : nc + ns])),
            size=int(np.argmax(row[nc + ns :])),
        )
        for row in feats
    )
    return Scene(objects)


def template_from_features(features: np.ndarray) -> str:
    return template_caption(scene_from_features(features))


def _random_scene(rng: np.random.Generator) -> Scene:
    n = int(rng.integers(1, MAX_OBJECTS + 1))
    objects = [
        SceneObject(
            color=int(rng.integers(len(COLORS))),
            shape=int(rng.integers(len(SHAPES))),
            size=int(rng.integers(len(SIZES))),
        )
        for _ in range(n)
    ]
    # canonical attribute order keeps caption order a function of the object set
    objects.sort(key=lambda o: (o.color, o.shape, o.size))
    return Scene(tuple(objects))


def _apply_noise(words: list[str], rng: np.random.Generator, noise: NoiseConfig,
                 ops: list[str]) -> list[str]:
    if noise.p_delete > 0.0:
        kept = [w for w in words if rng.random() >= noise.p_delete]
        if len(kept) != len(words):
            ops.append("delete")
            words = kept
    if noise.p_shuffle > 0.0 and rng.random() < noise.p_shuffle and len(words) > 1:
        perm = rng.permutation(len(words))
        shuffled = [words[i] for i in perm]
        if shuffled != words:
            ops.append("shuffle")
            words = shuffled
    if noise.p_insert > 0.0 and rng.random() < noise.p_insert:
        word = _TEMPLATE_WORDS[int(rng.integers(len(_TEMPLATE_WORDS)))]
        pos = int(rng.integers(len(words) + 1))
        words = words[:pos] + [word] + words[pos:]
        ops.append("insert")
    return words


def generate_corpus(n: int, noise: NoiseConfig, seed: int) -> list[CorpusRecord]:
    """Deterministic corpus of `n` records; per-record RNG streams derive from (seed, id)."""
    if n < 1:
        raise ValueError("corpus size must be at least 1")
    scenes = []
    features = []
    for i in range(n):
        rng = np.random.default_rng((seed, i, 0))
        scene = _random_scene(rng)
        scenes.append(scene)
        features.append(scene_features(scene, rng, noise.sigma_feature))
    templates = [template_caption(s) for s in scenes]

    records = []
    for i in range(n):
        rng = np.random.default_rng((seed, i, 1))
        ops: list[str] = []
        caption = templates[i]
        if noise.p_mismatch > 0.0 and n > 1 and rng.random() < noise.p_mismatch:
            # swap in a different scene's caption; rejection-sample, then scan
            partner = None
            for _ in range(64):
                j = int(rng.integers(n))
                if templates[j] != templates[i]:
                    partner = j
                    break
            if partner is None:
                partner = next((j for j in range(n) if templates[j] != templates[i]), None)
            if partner is not None:
                caption = templates[partner]
                ops.append("mismatch")
        words = _apply_noise(caption.split(), rng, noise, ops)
        caption = " ".join(words)
        records.append(
            CorpusRecord(id=i, features=features[i], caption=caption,
                         noisy=bool(ops), noise_ops=ops)
        )
    return records


def _round_sig(x: float) -> float:
    return float(f"{x:.9g}")


def write_corpus(records: Sequence[CorpusRecord], path) -> None:
    """JSON Lines, one record per line; floats carry 9 significant digits."""
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            row = {
                "id": rec.id,
                "features": [[_round_sig(v) for v in region] for region in rec.features],
                "caption": rec.caption,
                "noisy": rec.noisy,
                "noise_ops": list(rec.noise_ops),
            }
            fh.write(json.dumps(row, separators=(",", ":")) + "\n")


_REQUIRED_FIELDS = ("id", "features", "caption", "noisy", "noise_ops")


def read_corpus(path) -> list[CorpusRecord]:
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if line.strip() == "":
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError:
                raise ValueError(f"malformed record at line {lineno}") from None
            for key in _REQUIRED_FIELDS:
                if key not in row:
                    raise ValueError(f"missing field '{key}' at line {lineno}")
            features = np.asarray(row["features"], dtype=np.float64)
            if features.ndim != 2:
                raise ValueError(f"malformed record at line {lineno}: bad features shape")
            records.append(
                CorpusRecord(
                    id=int(row["id"]),
                    features=features,
                    caption=str(row["caption"]),
                    noisy=bool(row["noisy"]),
                    noise_ops=[str(op) for op in row["noise_ops"]],
                )
            )
    return records
