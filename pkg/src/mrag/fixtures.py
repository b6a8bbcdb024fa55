"""Synthetic datasets for offline runs, tests and benchmarks.

Captions are drawn from a small grammar.  Text vectors come from the
:class:`~mrag.genclient.HashEmbedder`; image vectors are a fixed random
rotation of the mean caption vector plus an offset and Gaussian noise, so
raw image/text retrieval suffers a planted modality gap.
"""

from __future__ import annotations

import numpy as np

from .embedio import PairRecord
from .genclient import HashEmbedder

COLORS = ["red", "blue", "green", "yellow", "black", "white", "brown", "orange"]
OBJECTS = ["bus", "cat", "dog", "bicycle", "horse", "boat", "kite", "train", "pizza", "bench"]
PLACES = ["street", "beach", "park", "field", "kitchen", "river", "station", "garden"]
VERBS = ["sitting", "parked", "standing", "running", "resting", "waiting"]


def random_rotation(d: int, rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((d, d)))
    return q * np.sign(np.diag(r))


def rotated_pairs(n: int, d: int, noise: float, rng: np.random.Generator):
    """``(V, E, R)`` with unit rows ``v`` and ``e = R v + noise``."""
    v = rng.standard_normal((n, d))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    rot = random_rotation(d, rng)
    e = v @ rot.T + noise * rng.standard_normal((n, d))
    return v, e, rot


def _caption(rng: np.random.Generator, color: str, obj: str) -> str:
    place = PLACES[rng.integers(len(PLACES))]
    verb = VERBS[rng.integers(len(VERBS))]
    return f"a {color} {obj} {verb} in the {place}"


def caption_dataset(n_images: int = 20, captions_per_image: int = 2, dim: int = 8,
                    seed: int = 0, noise: float = 0.05, offset: float = 0.5,
                    embed_seed: int = 0) -> list[PairRecord]:
    rng = np.random.default_rng(seed)
    embedder = HashEmbedder(dim, embed_seed)
    rot = random_rotation(dim, rng)
    shift = offset * rng.standard_normal(dim)
    records = []
    for i in range(n_images):
        color = COLORS[rng.integers(len(COLORS))]
        obj = OBJECTS[rng.integers(len(OBJECTS))]
        caps = []
        while len(caps) < captions_per_image:
            c = _caption(rng, color, obj)
            if c not in caps:
                caps.append(c)
        texts = embedder.embed(caps)
        image = rot @ texts.mean(axis=0) + shift + noise * rng.standard_normal(dim)
        image32 = image.astype(np.float32)
        for cap, t in zip(caps, texts):
            records.append(PairRecord(f"img{i:04d}", cap, image32, t.astype(np.float32)))
    return records


def split_indices(records, fractions=(0.6, 0.2, 0.2)) -> dict[str, list[int]]:
    """Image-level train/val/test split over record indices, in id order."""
    ids = list(dict.fromkeys(r.image_id for r in records))
    n = len(ids)
    a = int(round(fractions[0] * n))
    b = a + int(round(fractions[1] * n))
    part = {i: ("train" if t < a else "val" if t < b else "test") for t, i in enumerate(ids)}
    out: dict[str, list[int]] = {"train": [], "val": [], "test": []}
    for t, rec in enumerate(records):
        out[part[rec.image_id]].append(t)
    return out
