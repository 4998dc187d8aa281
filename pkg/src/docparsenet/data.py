"""Synthetic document pages, random cropping, splits and on-disk corpora.

Corpus layout::

    <root>/manifest.tsv                       split, sample_id, sha256 per line
    <root>/<split>/<sample_id>.image.dtf      f32 [3, H, W] in [0, 1]
    <root>/<split>/<sample_id>.masks.dtf      u8  [5, H, W]
    <root>/<split>/<sample_id>.text.txt
    <root>/<split>/<sample_id>.embed.dtf      optional f32 [768]
"""

from __future__ import annotations

import hashlib
import os
import zlib
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .dtf import atomic_write_bytes, dtf_read, dtf_write, encode
from .errors import ContractError, DataError, GenerationError, ShapeError
from .model import FIELDS

SPLITS = ("train", "val", "test")
MIN_COVERAGE, MAX_COVERAGE = 0.002, 0.20

_TITLES = [
    "OIL AND GAS LEASE", "MINERAL DEED", "RIGHT OF WAY AGREEMENT", "ASSIGNMENT OF LEASE",
    "SURFACE USE AGREEMENT", "PIPELINE EASEMENT", "ROYALTY DEED", "MEMORANDUM OF LEASE",
]
_STATES = ["TEXAS", "OHIO", "OKLAHOMA", "NEW MEXICO", "WYOMING", "COLORADO", "NORTH DAKOTA", "LOUISIANA"]
_COUNTIES = ["REEVES", "WASHINGTON", "MIDLAND", "BELMONT", "KINGFISHER", "WELD", "EDDY", "CADDO", "WARD"]
_NAME_A = ["ACME", "BLUE MESA", "RED RIVER", "SUMMIT", "PRAIRIE", "IRONWOOD", "CANYON", "NORTHSTAR"]
_NAME_B = ["ENERGY", "RESOURCES", "MINERALS", "HOLDINGS", "PETROLEUM", "LAND"]
_NAME_C = ["LLC", "INC", "LP", "CO"]


@dataclass
class Sample:
    image: np.ndarray  # f32 [3, H, W]
    masks: np.ndarray  # u8 [5, H, W], channel order = FIELDS
    sample_id: str
    text: str
    embedding: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.image.ndim != 3 or self.masks.ndim != 3 or self.image.shape[1:] != self.masks.shape[1:]:
            raise ShapeError(
                f"image {list(self.image.shape)} and masks {list(self.masks.shape)} are not aligned"
            )

    @property
    def size(self):
        return self.image.shape[1:]


def _stable_hash(text: str) -> int:
    return zlib.crc32(text.encode("utf-8"))


def random_crop(s: Sample, crop, seed) -> Sample:
    """Crop image and masks at the same offset, drawn per (seed, sample_id)."""
    h, w = crop
    H, W = s.size
    if h > H or w > W:
        raise ShapeError(f"crop {h}x{w} larger than image {H}x{W}")
    if (h, w) == (H, W):
        return s
    rng = np.random.default_rng([int(seed), _stable_hash(s.sample_id)])
    top = int(rng.integers(0, H - h + 1))
    left = int(rng.integers(0, W - w + 1))
    return Sample(
        s.image[:, top : top + h, left : left + w].copy(),
        s.masks[:, top : top + h, left : left + w].copy(),
        s.sample_id,
        s.text,
        s.embedding,
    )


# ---------------------------------------------------------------------------
# synthetic pages


def _texture(kind: int, h: int, w: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    if kind == 0:  # horizontal bars
        tex = np.where((yy // 2) % 2 == 0, 0.15, 0.75)
    elif kind == 1:  # vertical bars
        tex = np.where((xx // 2) % 2 == 0, 0.2, 0.8)
    elif kind == 2:  # checkerboard
        tex = np.where(((yy // 2) + (xx // 2)) % 2 == 0, 0.1, 0.9)
    elif kind == 3:  # diagonal hatching
        tex = np.where(((yy + xx) // 2) % 3 == 0, 0.1, 0.7)
    else:  # flat grey with a dot lattice
        tex = np.where((yy % 3 == 1) & (xx % 3 == 1), 0.05, 0.45)
    tex = tex.astype(np.float32)
    tex[0, :] = tex[-1, :] = tex[:, 0] = tex[:, -1] = 0.0
    return tex


def _place_regions(rng, H, W, tries=500):
    hmin, hmax = max(4, int(0.08 * H)), max(5, int(0.2 * H))
    wmin, wmax = max(4, int(0.15 * W)), max(5, int(0.4 * W))
    placed = []
    for _ in range(len(FIELDS)):
        for _ in range(tries):
            h = int(rng.integers(hmin, hmax + 1))
            w = int(rng.integers(wmin, wmax + 1))
            if h + 2 > H or w + 2 > W:
                continue
            top = int(rng.integers(1, H - h))
            left = int(rng.integers(1, W - w))
            # keep a 2-pixel gap between regions
            if all(
                top + h + 2 <= t or t + rh + 2 <= top or left + w + 2 <= l or l + rw + 2 <= left
                for t, l, rh, rw in placed
            ):
                placed.append((top, left, h, w))
                break
        else:
            raise GenerationError(f"page {H}x{W} is too small to place {len(FIELDS)} field regions")
    return placed


def _field_strings(rng):
    def company():
        return f"{rng.choice(_NAME_A)} {rng.choice(_NAME_B)} {rng.choice(_NAME_C)}"

    return [str(rng.choice(_TITLES)), str(rng.choice(_STATES)), str(rng.choice(_COUNTIES)), company(), company()]


def synth_page(sample_id: str, page, rng) -> Sample:
    H, W = page
    img = np.ones((H, W), dtype=np.float32)
    # pseudo-text: rows of dark word blocks
    y = int(rng.integers(2, 6))
    while y + 2 < H:
        x = int(rng.integers(1, 8))
        while x < W - 2:
            word = int(rng.integers(3, 12))
            img[y : y + 2, x : min(W, x + word)] = rng.uniform(0.0, 0.35)
            x += word + int(rng.integers(2, 5))
        y += int(rng.integers(5, 9))
    masks = np.zeros((len(FIELDS), H, W), dtype=np.uint8)
    for k, (top, left, h, w) in enumerate(_place_regions(rng, H, W)):
        img[top : top + h, left : left + w] = _texture(k, h, w)
        masks[k, top : top + h, left : left + w] = 1
    img += rng.normal(0.0, 0.02, size=img.shape).astype(np.float32)
    img = np.clip(img, 0.0, 1.0)
    coverage = masks.reshape(len(FIELDS), -1).mean(axis=1)
    if coverage.min() < MIN_COVERAGE or coverage.max() > MAX_COVERAGE:
        raise GenerationError(f"{sample_id}: field coverage {coverage.round(4).tolist()} outside bounds")
    labels = ["AGREEMENT", "STATE", "COUNTY", "GRANTOR", "GRANTEE"]
    text = "\n".join(f"{k}: {v}" for k, v in zip(labels, _field_strings(rng)))
    return Sample(np.repeat(img[None], 3, axis=0), masks, sample_id, text)


def synth_generate(n: int, page=(256, 256), seed: int = 0) -> list:
    """Generate ``n`` synthetic pages, each with five non-overlapping field boxes."""
    if n < 1:
        raise ContractError("n must be >= 1")
    H, W = page
    if H < 16 or W < 16:
        raise GenerationError(f"page {H}x{W} is too small to place {len(FIELDS)} field regions")
    return [synth_page(f"s{seed}-{i:05d}", page, np.random.default_rng([int(seed), i])) for i in range(n)]


def split_dataset(samples, ratios=(8, 1, 1), seed: int = 0):
    """Deterministic shuffled split into (train, val, test)."""
    samples = list(samples)
    n = len(samples)
    if n < 10:
        raise ContractError(f"need >= 10 samples to split, got {n}")
    total = sum(ratios)
    n_val = int(n * ratios[1] / total + 0.5)
    n_test = int(n * ratios[2] / total + 0.5)
    order = np.random.default_rng(seed).permutation(n)
    picked = [samples[i] for i in order]
    n_train = n - n_val - n_test
    return picked[:n_train], picked[n_train : n_train + n_val], picked[n_train + n_val :]


# ---------------------------------------------------------------------------
# corpus IO


def _sample_files(root, split, sid):
    base = os.path.join(root, split, sid)
    return base + ".image.dtf", base + ".masks.dtf", base + ".text.txt", base + ".embed.dtf"


def write_corpus(root, splits: dict, embeddings: Optional[dict] = None) -> str:
    """Write samples per split plus ``manifest.tsv``; returns the manifest path."""
    lines = []
    for split in SPLITS:
        os.makedirs(os.path.join(root, split), exist_ok=True)
        for s in splits.get(split, []):
            img_p, msk_p, txt_p, emb_p = _sample_files(root, split, s.sample_id)
            blobs = [
                encode({"image": s.image.astype(np.float32)}),
                encode({"masks": s.masks.astype(np.uint8)}),
                s.text.encode("utf-8"),
            ]
            for path, blob in zip((img_p, msk_p, txt_p), blobs):
                atomic_write_bytes(path, blob)
            if embeddings is not None:
                dtf_write(emb_p, {"embedding": np.asarray(embeddings[s.sample_id], dtype=np.float32)})
            digest = hashlib.sha256(b"".join(blobs)).hexdigest()
            lines.append(f"{split}\t{s.sample_id}\t{digest}\n")
    manifest = os.path.join(root, "manifest.tsv")
    atomic_write_bytes(manifest, "".join(lines).encode("utf-8"))
    return manifest


def read_manifest(root) -> list:
    path = os.path.join(root, "manifest.tsv")
    if not os.path.isfile(path):
        raise DataError(f"no corpus at {root}: missing {path}")
    with open(path, encoding="utf-8") as fh:
        return [tuple(line.rstrip("\n").split("\t")) for line in fh if line.strip()]


def load_split(root, split) -> list:
    """Load one split in manifest order."""
    if split not in SPLITS:
        raise DataError(f"unknown split {split!r}; expected one of {SPLITS}")
    out = []
    for sp, sid, _ in read_manifest(root):
        if sp != split:
            continue
        img_p, msk_p, txt_p, emb_p = _sample_files(root, split, sid)
        try:
            image = dtf_read(img_p)["image"]
            masks = dtf_read(msk_p)["masks"]
            with open(txt_p, encoding="utf-8") as fh:
                text = fh.read()
        except (FileNotFoundError, KeyError) as exc:
            raise DataError(f"corpus sample {sid!r} is incomplete: {exc}") from None
        emb = dtf_read(emb_p)["embedding"] if os.path.isfile(emb_p) else None
        out.append(Sample(image, masks, sid, text, emb))
    return out
