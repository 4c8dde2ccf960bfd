"""Dense map rendering: sound-source Gaussians and refined saliency maps.

A speaking face becomes an unnormalized Gaussian bump centered on its box
(quarter-extent covariance, so ~95% of the mass stays inside the box); the
per-frame sound-source map is the sum of the bumps of faces classified as
speaking. Saliency starts from a visual prior (center bias plus a uniform
mixture of face bumps), is multiplied per region by the network's
self-attention weights, passes through a small 3-layer convolutional
refiner, and is renormalized to unit mass per frame.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .container import read_container, write_container
from .errors import ConfigError, ContractError, DegenerateMapError, GeometryError
from .numerics import GridSpec, Tensor, gaussian2d

MAPS_VERSION = "mvsmaps-1"

CENTER_BIAS_WEIGHT = 0.3


@dataclass(frozen=True)
class GaussianParams:
    mu: tuple  # (x, y) pixels
    sigma: tuple  # ((sxx, sxy), (syx, syy)) pixels^2


def _box_fields(box):
    if hasattr(box, "w"):
        return float(box.x), float(box.y), float(box.w), float(box.h)
    x, y, w, h = box
    return float(x), float(y), float(w), float(h)


def face_gaussian(box):
    """Quarter-extent Gaussian for a face box: mu at the center,
    sigma = diag((w/4)^2, (h/4)^2)."""
    x, y, w, h = _box_fields(box)
    if w <= 0 or h <= 0:
        raise GeometryError(f"degenerate box {box!r}")
    mu = (x + w / 2.0, y + h / 2.0)
    sigma = ((w / 4.0) ** 2, 0.0), (0.0, (h / 4.0) ** 2)
    return GaussianParams(mu=mu, sigma=sigma)


def render_gaussian(params, grid):
    return gaussian2d(params.mu, params.sigma, grid).numpy()


def sound_source_map(speaking, gaussians, grid):
    """Sum of the Gaussians of faces flagged as speaking.

    ``speaking`` holds one 0/1 entry per face, aligned with ``gaussians``.
    Returns an (H, W) float array; all-zero when nobody speaks.
    """
    if len(speaking) != len(gaussians):
        raise ContractError(
            f"{len(speaking)} labels for {len(gaussians)} gaussians"
        )
    acc = np.zeros((grid.height, grid.width))
    for flag, g in zip(speaking, gaussians):
        if flag:
            acc += render_gaussian(g, grid)
    return acc


def binarize(map_values, threshold=0.5):
    """1 where value >= threshold * max, else 0. A nonpositive map is all-zero."""
    if not 0.0 <= threshold <= 1.0:
        raise ContractError(f"threshold must lie in [0,1], got {threshold}")
    arr = np.asarray(map_values, dtype=np.float64)
    peak = arr.max() if arr.size else 0.0
    if peak <= 0.0:
        return np.zeros_like(arr)
    return (arr >= threshold * peak).astype(np.float64)


# -- attention-guided refinement -------------------------------------------------


@dataclass
class RefinerParams:
    """Three odd-sized convolutions with a 1 -> 8 -> 8 -> 1 channel plan."""

    k1: Tensor
    b1: Tensor
    k2: Tensor
    b2: Tensor
    k3: Tensor
    b3: Tensor
    slope: float = 0.2

    CHANNELS = 8

    def __post_init__(self):
        c = self.CHANNELS
        for name, t, want in (
            ("k1", self.k1, (c, 1)),
            ("k2", self.k2, (c, c)),
            ("k3", self.k3, (1, c)),
        ):
            if t.data.ndim != 4 or t.data.shape[:2] != want:
                raise ConfigError(f"{name} must have shape ({want[0]},{want[1]},odd,odd)")
            if t.data.shape[2] % 2 == 0 or t.data.shape[3] % 2 == 0:
                raise ConfigError(f"{name} kernel extents must be odd")

    @classmethod
    def identity(cls, kernel_size=3, slope=0.2):
        """Exact pass-through for nonnegative inputs (center taps only)."""
        c = cls.CHANNELS
        mid = kernel_size // 2
        k1 = np.zeros((c, 1, kernel_size, kernel_size))
        k1[0, 0, mid, mid] = 1.0
        k2 = np.zeros((c, c, kernel_size, kernel_size))
        k2[0, 0, mid, mid] = 1.0
        k3 = np.zeros((1, c, kernel_size, kernel_size))
        k3[0, 0, mid, mid] = 1.0
        return cls(
            k1=Tensor.param(k1),
            b1=Tensor.param(np.zeros(c)),
            k2=Tensor.param(k2),
            b2=Tensor.param(np.zeros(c)),
            k3=Tensor.param(k3),
            b3=Tensor.param(np.zeros(1)),
            slope=slope,
        )

    @classmethod
    def init(cls, rng, noise=0.01, kernel_size=3, slope=0.2):
        """Near-identity start so early saliency tracks the visual prior."""
        p = cls.identity(kernel_size=kernel_size, slope=slope)
        for t in (p.k1, p.k2, p.k3):
            t.data = t.data + rng.normal(0.0, noise, size=t.data.shape)
        return p

    def parameters(self):
        return {
            "refiner.k1": self.k1,
            "refiner.b1": self.b1,
            "refiner.k2": self.k2,
            "refiner.b2": self.b2,
            "refiner.k3": self.k3,
            "refiner.b3": self.b3,
        }

    def apply(self, frames):
        """(T, H, W) tensor -> (T, H, W) tensor through the 3 convolutions."""
        T, H, W = frames.shape
        x = nm.reshape(frames, (T, 1, H, W))
        x = nm.leaky_relu(nm.conv2d(x, self.k1, self.b1), self.slope)
        x = nm.leaky_relu(nm.conv2d(x, self.k2, self.b2), self.slope)
        x = nm.conv2d(x, self.k3, self.b3)
        return nm.reshape(x, (T, H, W))


def region_owner_grid(grid, boxes):
    """Which face region owns each pixel; -1 marks the background.

    A pixel inside several boxes belongs to the box with the nearest center,
    so multiplicative re-weighting never double-applies.
    """
    xs, ys = grid.coords()
    n = len(boxes)
    if n == 0:
        return np.full((grid.height, grid.width), -1, dtype=np.int64)
    dist = np.full((n, grid.height, grid.width), np.inf)
    for i, box in enumerate(boxes):
        x, y, w, h = _box_fields(box)
        if w <= 0 or h <= 0:
            raise GeometryError(f"degenerate box {box!r}")
        inside = (xs >= x) & (xs < x + w) & (ys >= y) & (ys < y + h)
        cx, cy = x + w / 2.0, y + h / 2.0
        dist[i] = np.where(inside, (xs - cx) ** 2 + (ys - cy) ** 2, np.inf)
    owner = dist.argmin(axis=0)
    covered = np.isfinite(dist.min(axis=0))
    return np.where(covered, owner, -1)


def assignment_masks(grid, boxes):
    """Per-face pixel masks plus the background mask, from the owner grid."""
    owner = region_owner_grid(grid, boxes)
    masks = np.stack(
        [(owner == i).astype(np.float64) for i in range(len(boxes))]
    )
    return masks, (owner == -1).astype(np.float64)


def _weight_volume(masks, background, face_weights, background_weight, frames):
    """(T, H, W) tensor of per-pixel multiplicative weights.

    ``face_weights[n]`` and ``background_weight`` are length-T tensors (or
    scalars broadcast over frames).
    """
    terms = []
    for mask, w in zip(masks, face_weights):
        w = w if isinstance(w, Tensor) else Tensor(np.full(frames, float(w)))
        terms.append(nm.reshape(w, (frames, 1, 1)) * Tensor(mask[None, :, :]))
    bg = (
        background_weight
        if isinstance(background_weight, Tensor)
        else Tensor(np.full(frames, float(background_weight)))
    )
    terms.append(nm.reshape(bg, (frames, 1, 1)) * Tensor(background[None, :, :]))
    acc = terms[0]
    for t in terms[1:]:
        acc = acc + t
    return acc


def _normalize_frames(frames):
    mass = nm.sum_(frames, axis=(1, 2), keepdims=True)
    if (mass.data <= 0).any():
        raise DegenerateMapError("refined map has no positive mass to normalize")
    return frames / mass


def refine_frames(grids, boxes, face_weights, background_weight, refiner, grid):
    """Re-weight per region, refine, clamp nonnegative, renormalize per frame.

    ``grids`` is a (T, H, W) tensor or array of input feature maps;
    ``face_weights`` is one length-T weight tensor per box. Returns a
    (T, H, W) tensor whose frames each sum to 1.
    """
    g = grids if isinstance(grids, Tensor) else Tensor(grids)
    T = g.shape[0]
    masks, background = assignment_masks(grid, boxes)
    weights = _weight_volume(masks, background, face_weights, background_weight, T)
    refined = refiner.apply(g * weights)
    return _normalize_frames(nm.clamp(refined, lo=0.0))


def attention_refine(feature_grid, boxes, face_weights, background_weight, refiner, grid):
    """Single-frame refinement; see :func:`refine_frames`."""
    g = feature_grid if isinstance(feature_grid, Tensor) else Tensor(feature_grid)
    frames = nm.reshape(g, (1,) + g.shape)
    weights = [
        w if isinstance(w, Tensor) else Tensor(np.array([float(w)]))
        for w in face_weights
    ]
    for i, w in enumerate(weights):
        if w.ndim == 0:
            weights[i] = nm.reshape(w, (1,))
    bg = background_weight
    if isinstance(bg, Tensor) and bg.ndim == 0:
        bg = nm.reshape(bg, (1,))
    out = refine_frames(frames, boxes, weights, bg, refiner, grid)
    return nm.getitem(out, 0)


def visual_prior(scene):
    """Center-bias Gaussian blended with a uniform mixture of face bumps."""
    grid = scene.grid
    w, h = grid.width, grid.height
    center = gaussian2d(
        (w / 2.0, h / 2.0), ((w / 4.0) ** 2, 0.0, 0.0, (h / 4.0) ** 2), grid
    ).numpy()
    faces = np.zeros((h, w))
    for track in scene.faces:
        faces += render_gaussian(face_gaussian(track.boxes[0]), grid)
    faces /= len(scene.faces)
    return CENTER_BIAS_WEIGHT * center + (1.0 - CENTER_BIAS_WEIGHT) * faces


def predict_saliency(scene, attention_weights, refiner):
    """Per-frame saliency: visual prior re-weighted by attention, refined.

    ``attention_weights`` is the per-frame (nodes, weights) list produced by
    the network — one weight per face (applied inside its box) and a final
    visual-node weight (applied to the background). Returns a (T, H, W)
    tensor, each frame normalized to unit mass.
    """
    T = scene.frame_count
    if len(attention_weights) != T:
        raise ContractError(
            f"attention record covers {len(attention_weights)} frames, scene has {T}"
        )
    prior = visual_prior(scene)
    grids = Tensor(np.broadcast_to(prior, (T,) + prior.shape).copy())
    boxes = [track.boxes[0] for track in scene.faces]
    n = len(boxes)
    face_cols = []
    bg_col = []
    for t, (nodes, w) in enumerate(attention_weights):
        if len(nodes) != n + 1:
            raise ContractError(
                f"frame {t} attention covers {len(nodes)} nodes, expected {n + 1}"
            )
        face_cols.append(nm.getitem(w, slice(0, n)))
        bg_col.append(nm.getitem(w, slice(n, n + 1)))
    per_face = []
    stacked = nm.stack(face_cols)  # (T, N)
    for i in range(n):
        per_face.append(nm.getitem(stacked, (slice(None), i)))
    background = nm.reshape(nm.stack(bg_col), (T,))
    return refine_frames(grids, boxes, per_face, background, refiner, scene.grid)


# -- exports ---------------------------------------------------------------------


def write_pgm(path, map_values):
    """8-bit binary PGM, scaled so the map maximum lands on 255."""
    arr = np.asarray(map_values, dtype=np.float64)
    peak = arr.max()
    scaled = np.zeros_like(arr) if peak <= 0 else arr / peak * 255.0
    data = np.round(scaled).astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def write_maps(path, named_maps, meta=None):
    """Bit-exact float64 sidecar holding named map stacks."""
    header = {"meta": meta or {}}
    write_container(path, MAPS_VERSION, header, sorted(named_maps.items()))


def read_maps(path):
    header, arrays = read_container(path, MAPS_VERSION)
    return arrays, header.get("meta", {})
