"""Procedural face-like dataset with per-identity landmark geometry and part appearance.

Each identity owns a latent vector that deforms a canonical 68-point face
and sets the colour of every landmark region plus a low-frequency
background texture. A sample places the face in a raw frame under random
rotation, scale and translation, perturbs the "detected" landmarks, aligns
them with :func:`prnface.geometry.align_face` and rasterises the true face
in the aligned frame. Pixels are quantised to 8 bits; ``images()`` divides
by 255.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from ..errors import InvalidConfig
from ..geometry import LandmarkSet, align_face

LATENT_DIM = 12
# Strength of the identity latent in each appearance channel.
SHAPE_STRENGTH = 0.035
COLOR_STRENGTH = 0.2
TONE_STRENGTH = 0.1
RAW_FRAME = 400.0
RAW_FACE_SCALE = 100.0


def canonical_face() -> np.ndarray:
    """68-point frontal template in unit coordinates (x right, y down)."""
    pts = []
    for k in range(17):  # jaw, left temple -> chin -> right temple
        t = math.pi * k / 16
        pts.append((-0.9 * math.cos(t), 0.1 + 0.9 * math.sin(t)))
    for side in (-1, 1):  # brows
        xs = np.linspace(0.75, 0.15, 5) if side < 0 else np.linspace(0.15, 0.75, 5)
        for x in xs:
            pts.append((side * x if side > 0 else -x, -0.45 - 0.08 * math.sin(math.pi * (x - 0.15) / 0.6)))
    for y in np.linspace(-0.3, 0.15, 4):  # nose bridge
        pts.append((0.0, y))
    for x in np.linspace(-0.2, 0.2, 5):  # nostrils
        pts.append((x, 0.25 + 0.05 * (1 - abs(x) / 0.2)))
    for cx in (-0.4, 0.4):  # eyes
        for k in range(6):
            t = math.pi - 2 * math.pi * k / 6
            pts.append((cx + 0.15 * math.cos(t), -0.25 - 0.06 * math.sin(t)))
    for k in range(12):  # outer lip
        t = math.pi - 2 * math.pi * k / 12
        pts.append((0.35 * math.cos(t), 0.55 - 0.13 * math.sin(t)))
    for k in range(8):  # inner lip
        t = math.pi - 2 * math.pi * k / 8
        pts.append((0.2 * math.cos(t), 0.55 - 0.05 * math.sin(t)))
    out = np.array(pts, dtype=np.float64)
    assert out.shape == (68, 2)
    return out


@dataclass(frozen=True)
class NuisanceRanges:
    rotation: float = 0.5          # radians, uniform +/-
    translation: float = 20.0      # raw pixels, uniform +/-
    scale: float = 0.15            # relative, uniform +/-
    shape_jitter: float = 0.02     # template units, normal std
    detect_noise: float = 1.5      # raw pixels, normal std on detected landmarks
    brightness: float = 0.06       # uniform +/-
    color_gain: float = 0.2        # per-channel multiplicative, normal std
    pixel_noise: float = 0.1       # normal std

    @classmethod
    def none(cls) -> "NuisanceRanges":
        return cls(*(0.0 for _ in fields(cls)))


@dataclass(frozen=True)
class SyntheticIdentity:
    id: int
    latent: np.ndarray
    landmark_template: LandmarkSet  # unit coordinates


@dataclass
class Split:
    pixels: np.ndarray      # (N, S, S, 3) uint8
    landmarks: np.ndarray   # (N, 68, 2) aligned detected landmarks, pixels
    labels: np.ndarray      # (N,) int64
    nuisance: np.ndarray    # (N, 4): rotation, dx, dy, noise seed

    def __len__(self):
        return len(self.labels)

    def images(self, dtype=np.float32) -> np.ndarray:
        return self.pixels.astype(dtype) / np.asarray(255.0, dtype=dtype)


@dataclass
class Dataset:
    train: Split
    val: Split
    num_ids: int
    image_size: int
    seed: int
    nuisance: NuisanceRanges = field(default_factory=NuisanceRanges)

    def save(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        arrays = {}
        for name in ("train", "val"):
            split = getattr(self, name)
            for key in ("pixels", "landmarks", "labels", "nuisance"):
                arrays[f"{name}_{key}"] = getattr(split, key)
        np.savez(d / "dataset.npz", **arrays)
        meta = {"num_ids": self.num_ids, "image_size": self.image_size, "seed": self.seed,
                "nuisance": asdict(self.nuisance)}
        (d / "meta.json").write_text(json.dumps(meta, indent=2) + "\n")

    @classmethod
    def load(cls, directory) -> "Dataset":
        d = Path(directory)
        if not (d / "dataset.npz").exists():
            raise InvalidConfig(f"no dataset.npz in {d}")
        meta = json.loads((d / "meta.json").read_text())
        with np.load(d / "dataset.npz") as z:
            splits = {name: Split(*(z[f"{name}_{k}"] for k in ("pixels", "landmarks", "labels", "nuisance")))
                      for name in ("train", "val")}
        return cls(splits["train"], splits["val"], meta["num_ids"], meta["image_size"], meta["seed"],
                   NuisanceRanges(**meta["nuisance"]))


class _Appearance:
    """Fixed random maps from identity latents to shape and appearance."""

    def __init__(self, rng: np.random.Generator):
        self.shape_basis = rng.normal(0.0, SHAPE_STRENGTH, size=(LATENT_DIM, 68, 2))
        self.color_map = rng.normal(0.0, COLOR_STRENGTH, size=(LATENT_DIM, 68, 3))
        self.tone_map = rng.normal(0.0, TONE_STRENGTH, size=(LATENT_DIM, 3))
        self.wave_map = rng.normal(0.0, 1.0, size=(LATENT_DIM, 4))
        self.template = canonical_face()

    def identity(self, k: int, z: np.ndarray) -> SyntheticIdentity:
        pts = self.template + np.tensordot(z, self.shape_basis, axes=1)
        return SyntheticIdentity(k, z, LandmarkSet(pts))

    def colors(self, z):
        return 1.0 / (1.0 + np.exp(-np.tensordot(z, self.color_map, axes=1)))

    def background(self, z, size: int) -> np.ndarray:
        tone = 1.0 / (1.0 + np.exp(-(z @ self.tone_map)))
        w = z @ self.wave_map
        yy, xx = np.mgrid[0:size, 0:size] / size
        wave = 0.08 * np.sin(2 * math.pi * (w[0] * 0.5 * xx + w[1] * 0.5 * yy) + w[2])
        return 0.3 + 0.4 * tone[None, None, :] + wave[..., None] * np.sign(w[3] + 1e-12)


def sample_latents(num_ids: int, rng: np.random.Generator, min_gap: float = 1.0) -> np.ndarray:
    latents: list[np.ndarray] = []
    while len(latents) < num_ids:
        z = rng.normal(size=LATENT_DIM)
        if all(np.linalg.norm(z - other) >= min_gap for other in latents):
            latents.append(z)
    return np.array(latents)


def render(points: np.ndarray, colors: np.ndarray, background: np.ndarray, sigma: float) -> np.ndarray:
    size = background.shape[0]
    axis = np.arange(size) + 0.5
    gx = np.exp(-((axis[None, :] - points[:, 0:1]) ** 2) / (2 * sigma ** 2))  # (68, S) over x
    gy = np.exp(-((axis[None, :] - points[:, 1:2]) ** 2) / (2 * sigma ** 2))  # (68, S) over y
    weights = gy[:, :, None] * gx[:, None, :]                                  # (68, S, S)
    coverage = np.minimum(weights.sum(axis=0), 1.0)
    paint = np.einsum("kyx,kc->yxc", weights, colors) / np.maximum(weights.sum(axis=0), 1e-12)[..., None]
    return background * (1.0 - coverage[..., None]) + paint * coverage[..., None]


def _sample(ident: SyntheticIdentity, look: _Appearance, nz: NuisanceRanges, size: int,
            rng: np.random.Generator):
    rot = rng.uniform(-nz.rotation, nz.rotation) if nz.rotation else 0.0
    dx, dy = (rng.uniform(-nz.translation, nz.translation, size=2) if nz.translation else (0.0, 0.0))
    scl = RAW_FACE_SCALE * (1.0 + (rng.uniform(-nz.scale, nz.scale) if nz.scale else 0.0))
    shape = ident.landmark_template.points + (rng.normal(0.0, nz.shape_jitter, size=(68, 2))
                                              if nz.shape_jitter else 0.0)
    c, s = math.cos(rot), math.sin(rot)
    true_raw = scl * shape @ np.array([[c, s], [-s, c]]) + (RAW_FRAME / 2 + dx, RAW_FRAME / 2 + dy)
    detected = true_raw + (rng.normal(0.0, nz.detect_noise, size=(68, 2)) if nz.detect_noise else 0.0)
    transform, aligned = align_face(LandmarkSet(detected), size)
    face = transform.apply(true_raw)
    noise_seed = int(rng.integers(2 ** 31))
    img = render(face, look.colors(ident.latent), look.background(ident.latent, size), sigma=0.05 * size)
    if nz.color_gain:
        img = img * (1.0 + rng.normal(0.0, nz.color_gain, size=3))
    if nz.brightness:
        img = img + rng.uniform(-nz.brightness, nz.brightness)
    if nz.pixel_noise:
        img = img + np.random.default_rng(noise_seed).normal(0.0, nz.pixel_noise, size=img.shape)
    pixels = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    # a detector reports points inside the image; wide jaws can overhang the aligned frame
    points = np.clip(aligned.points, 0.0, float(size))
    return pixels, points, (rot, float(dx), float(dy), float(noise_seed))


def make_identities(num_ids: int, seed: int) -> tuple[list[SyntheticIdentity], _Appearance]:
    rng = np.random.default_rng([seed, 0])
    look = _Appearance(rng)
    latents = sample_latents(num_ids, rng)
    return [look.identity(k, z) for k, z in enumerate(latents)], look


def gen_dataset(num_ids: int = 16, samples_per_id: int = 40, nuisance: NuisanceRanges | None = None,
                seed: int = 0, image_size: int = 56, val_fraction: float = 0.1) -> Dataset:
    """Deterministic train/val split with ceil(val_fraction * K) validation samples per identity."""
    if num_ids < 2:
        raise InvalidConfig("need at least two identities")
    if samples_per_id < 2:
        raise InvalidConfig("need at least two samples per identity for a train/val split")
    if not 0 < val_fraction < 1:
        raise InvalidConfig("val_fraction must lie in (0, 1)")
    nuisance = NuisanceRanges() if nuisance is None else nuisance
    identities, look = make_identities(num_ids, seed)
    rng = np.random.default_rng([seed, 1])
    n_val = min(math.ceil(val_fraction * samples_per_id - 1e-9), samples_per_id - 1)
    buckets = {"train": [], "val": []}
    for ident in identities:
        val_slots = set(rng.permutation(samples_per_id)[:n_val].tolist())
        for k in range(samples_per_id):
            pixels, lm, nz = _sample(ident, look, nuisance, image_size, rng)
            buckets["val" if k in val_slots else "train"].append((pixels, lm, ident.id, nz))

    def pack(rows):
        return Split(np.stack([r[0] for r in rows]), np.stack([r[1] for r in rows]),
                     np.array([r[2] for r in rows], dtype=np.int64), np.array([r[3] for r in rows]))

    return Dataset(pack(buckets["train"]), pack(buckets["val"]), num_ids, image_size, seed, nuisance)
