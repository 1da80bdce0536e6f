"""Prompt-guided region selection and image/mask patch extraction.

A text embedder and an image embedder map a prompt and the cells of an
axial slice into a shared d-dimensional space. Cells are scored by cosine
similarity with the prompt, the best cells become ROIs, and aligned
image/mask crops are cut around them.

The embedders shipped here are deterministic toys. Anything implementing
:class:`TextEmbedder` / :class:`ImageEmbedder` (for example a wrapper
around a pretrained vision-language model) can replace them.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Protocol

import numpy as np

PATCH_MAGIC = b"PGPP"
PATCH_VERSION = 1
_PATCH_HEADER = struct.Struct("<4sIIB")
PROVENANCE_CODES = {"real": 0, "synthetic": 1}


class TextEmbedder(Protocol):
    dim: int

    def embed(self, prompt: str) -> np.ndarray: ...


class ImageEmbedder(Protocol):
    dim: int

    def embed_grid(self, image: np.ndarray, cell: int, stride: int) -> np.ndarray: ...


def _unit(v: np.ndarray, fallback: int = 0) -> np.ndarray:
    n = np.linalg.norm(v)
    if n == 0.0:
        v = np.zeros_like(v)
        v[fallback % v.size] = 1.0
        return v.astype(np.float32)
    return (v / n).astype(np.float32)


def _bucket(seed: int, key: bytes, d: int) -> tuple[int, float]:
    h = hashlib.blake2b(key, digest_size=8, salt=seed.to_bytes(8, "little")).digest()
    n = int.from_bytes(h, "little")
    return (n >> 1) % d, 1.0 if n & 1 else -1.0


class ToyTextEmbedder:
    """Signed feature hashing of character trigrams."""

    def __init__(self, dim: int = 64, seed: int = 0):
        self.dim = dim
        self.seed = seed

    def embed(self, prompt: str) -> np.ndarray:
        text = " ".join(prompt.lower().split())
        if not text:
            raise ValueError("prompt must be non-empty")
        padded = f" {text} "
        v = np.zeros(self.dim, dtype=np.float64)
        for i in range(len(padded) - 2):
            idx, sign = _bucket(self.seed, padded[i : i + 3].encode("utf-8"), self.dim)
            v[idx] += sign
        return _unit(v, fallback=_bucket(self.seed, padded.encode("utf-8"), self.dim)[0])


class ToyImageEmbedder:
    """Per-cell intensity histogram plus gradient-orientation histogram,
    feature-hashed to ``dim`` buckets and L2-normalized."""

    def __init__(self, dim: int = 64, seed: int = 0, intensity_bins: int = 16, orientation_bins: int = 8):
        self.dim = dim
        self.seed = seed
        self.intensity_bins = intensity_bins
        self.orientation_bins = orientation_bins
        n_feat = intensity_bins + orientation_bins
        pairs = [_bucket(seed + 1, f"feat{j}".encode(), dim) for j in range(n_feat)]
        self._index = np.array([p[0] for p in pairs])
        self._sign = np.array([p[1] for p in pairs])

    def _descriptor(self, img: np.ndarray, gy: np.ndarray, gx: np.ndarray) -> np.ndarray:
        n = img.size
        hist, _ = np.histogram(np.clip(img, -1.0, 1.0), bins=self.intensity_bins, range=(-1.0, 1.0))
        mag = np.hypot(gy, gx)
        ang = np.mod(np.arctan2(gy, gx), np.pi)
        ohist, _ = np.histogram(ang, bins=self.orientation_bins, range=(0.0, np.pi), weights=mag)
        return np.concatenate([hist / n, ohist / n])

    def embed_grid(self, image: np.ndarray, cell: int = 32, stride: int = 16) -> np.ndarray:
        image = np.asarray(image, dtype=np.float64)
        ny, nx = image.shape
        if cell > ny or cell > nx or cell < 1:
            raise ValueError(f"cell {cell} does not fit slice {image.shape}")
        if stride < 1:
            raise ValueError("stride must be >= 1")
        gy, gx = np.gradient(image)
        rows = (ny - cell) // stride + 1
        cols = (nx - cell) // stride + 1
        out = np.empty((rows, cols, self.dim), dtype=np.float32)
        for i in range(rows):
            for j in range(cols):
                win = np.s_[i * stride : i * stride + cell, j * stride : j * stride + cell]
                f = self._descriptor(image[win], gy[win], gx[win])
                v = np.zeros(self.dim)
                np.add.at(v, self._index, self._sign * f)
                out[i, j] = _unit(v)
        return out


_DEFAULT_TEXT = ToyTextEmbedder()
_DEFAULT_IMAGE = ToyImageEmbedder()


def embed_text(prompt: str, embedder: Optional[TextEmbedder] = None) -> np.ndarray:
    return (embedder or _DEFAULT_TEXT).embed(prompt)


def embed_image_grid(image: np.ndarray, cell: int = 32, stride: int = 16,
                     embedder: Optional[ImageEmbedder] = None) -> np.ndarray:
    """Embed every ``cell`` x ``cell`` window taken at ``stride``.

    Returns an array of shape (rows, cols, d) with
    rows = (ny - cell) // stride + 1 and likewise for cols.
    """
    return (embedder or _DEFAULT_IMAGE).embed_grid(image, cell, stride)


def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine similarity undefined for a zero vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


@dataclass
class SimilarityMap:
    values: np.ndarray
    cell: int
    stride: int

    def center(self, i: int, j: int) -> tuple[int, int]:
        return i * self.stride + self.cell // 2, j * self.stride + self.cell // 2


def similarity_map(text_vec, grid, cell: int = 32, stride: int = 16) -> SimilarityMap:
    t = np.asarray(text_vec, dtype=np.float64)
    g = np.asarray(grid, dtype=np.float64)
    if g.ndim != 3 or g.shape[-1] != t.shape[-1]:
        raise ValueError(f"embedding dim mismatch: text {t.shape}, grid {g.shape}")
    norms = np.linalg.norm(g, axis=-1) * np.linalg.norm(t)
    if np.any(norms == 0):
        raise ValueError("cosine similarity undefined for a zero vector")
    values = np.clip(g @ t / norms, -1.0, 1.0)
    return SimilarityMap(values, cell, stride)


@dataclass(frozen=True)
class ROI:
    center: tuple
    score: float


def select_roi(m: SimilarityMap, k: int = 4, threshold: float = -1.0, nms_radius: float = 16.0) -> list[ROI]:
    """Greedy top-k over cells scoring at least ``threshold``.

    Candidates are visited by descending score, ties by (row, col). A
    candidate is dropped if its center lies within ``nms_radius`` pixels of
    an already accepted ROI.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if nms_radius < 0:
        raise ValueError("nms_radius must be >= 0")
    vals = np.asarray(m.values)
    rows, cols = np.nonzero(vals >= threshold)
    order = sorted(zip(rows.tolist(), cols.tolist()), key=lambda rc: (-vals[rc], rc[0], rc[1]))
    picked: list[ROI] = []
    for i, j in order:
        c = m.center(i, j)
        if any(np.hypot(c[0] - p.center[0], c[1] - p.center[1]) <= nms_radius for p in picked):
            continue
        picked.append(ROI(c, float(vals[i, j])))
        if len(picked) == k:
            break
    return picked


@dataclass
class PatchPair:
    """Aligned image/mask crop with its origin.

    ``source`` is (volume id, z, (cy, cx)) where the center is the clamped
    crop center actually used.
    """

    image: np.ndarray
    mask: np.ndarray
    source: tuple = ("", -1, (-1, -1))
    provenance: str = "real"

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float32)
        self.mask = np.asarray(self.mask, dtype=np.uint8)
        if self.image.shape != self.mask.shape or self.image.ndim != 2:
            raise ValueError(f"image {self.image.shape} and mask {self.mask.shape} must be equal 2D shapes")
        if self.mask.size and self.mask.max() > 1:
            raise ValueError("mask must be binary")
        if self.image.size and (self.image.min() < -1.0 or self.image.max() > 1.0):
            raise ValueError("image must lie in [-1, 1]")
        if self.provenance not in PROVENANCE_CODES:
            raise ValueError(f"unknown provenance {self.provenance!r}")

    @property
    def ps(self) -> int:
        return self.image.shape[0]


def crop_window(shape, center, ps: int) -> tuple[int, int]:
    """Top-left corner of the in-bounds ``ps`` crop nearest to ``center``."""
    ny, nx = shape
    top = int(np.clip(center[0] - ps // 2, 0, ny - ps))
    left = int(np.clip(center[1] - ps // 2, 0, nx - ps))
    return top, left


def extract_patches(image, mask, rois, ps: int = 64, volume_id: str = "", z: int = -1) -> list[PatchPair]:
    image = np.asarray(image)
    mask = np.asarray(mask)
    if image.shape != mask.shape:
        raise ValueError("image and mask slices differ in shape")
    if ps % 2:
        raise ValueError("patch size must be even")
    if ps > image.shape[0] or ps > image.shape[1]:
        raise ValueError(f"patch size {ps} exceeds slice {image.shape}")
    out = []
    for roi in rois:
        top, left = crop_window(image.shape, roi.center, ps)
        win = np.s_[top : top + ps, left : left + ps]
        center = (top + ps // 2, left + ps // 2)
        out.append(PatchPair(image[win].copy(), mask[win].copy(), (volume_id, z, center), "real"))
    return out


def localize_slice(image, mask, prompt: str, k: int = 4, ps: int = 64, cell: int = 32, stride: int = 16,
                   threshold: float = -1.0, nms_radius: float = 16.0, volume_id: str = "", z: int = -1,
                   text_embedder: Optional[TextEmbedder] = None,
                   image_embedder: Optional[ImageEmbedder] = None) -> list[PatchPair]:
    """Prompt -> similarity map -> ROIs -> patch pairs for one slice."""
    t = embed_text(prompt, text_embedder)
    grid = embed_image_grid(image, cell, stride, image_embedder)
    rois = select_roi(similarity_map(t, grid, cell, stride), k, threshold, nms_radius)
    return extract_patches(image, mask, rois, ps, volume_id, z)


def save_patch(p: PatchPair, path) -> None:
    if p.image.shape[0] != p.image.shape[1]:
        raise ValueError("PGPP stores square patches only")
    header = _PATCH_HEADER.pack(PATCH_MAGIC, PATCH_VERSION, p.ps, PROVENANCE_CODES[p.provenance])
    payload = p.image.astype("<f4").tobytes() + p.mask.astype("u1").tobytes()
    Path(path).write_bytes(header + payload)


def load_patch(path) -> PatchPair:
    data = Path(path).read_bytes()
    if data[:4] != PATCH_MAGIC:
        raise ValueError(f"bad magic {data[:4]!r}")
    if len(data) < _PATCH_HEADER.size:
        raise ValueError("truncated header")
    _, version, ps, prov = _PATCH_HEADER.unpack_from(data)
    if version != PATCH_VERSION:
        raise ValueError(f"version mismatch: file {version}, supported {PATCH_VERSION}")
    n = ps * ps
    body = data[_PATCH_HEADER.size:]
    if len(body) != 5 * n:
        raise ValueError(f"payload is {len(body)} bytes, expected {5 * n}")
    image = np.frombuffer(body[: 4 * n], dtype="<f4").reshape(ps, ps).copy()
    mask = np.frombuffer(body[4 * n:], dtype="u1").reshape(ps, ps).copy()
    names = {v: k for k, v in PROVENANCE_CODES.items()}
    if prov not in names:
        raise ValueError(f"unknown provenance code {prov}")
    return PatchPair(image, mask, (Path(path).stem, -1, (-1, -1)), names[prov])


def load_patch_dir(directory) -> list[PatchPair]:
    return [load_patch(p) for p in sorted(Path(directory).glob("*.pgpp"))]
