"""Synthetic multi-face conversation scenes with ground truth.

Each scene is a short clip: N face tracks with bounding boxes, exactly one
speaking face per frame (speaking turns of random length, with an optional
background-voiced mode where no face speaks), per-subject fixations that
follow the active speaker after a configurable lag, and a fixation density
map per frame. Face, visual and audio feature vectors carry a planted linear
signal of the speaking state at a configurable signal-to-noise ratio; the
planting directions come from a basis seed shared across scenes so a model
can generalize.

Scenes serialize to the ``.mvs`` container (version ``mvs-1``): geometry,
labels and fixations in the text header, features and density maps in the
float payload. Round-trips are lossless and byte-stable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .container import read_container, write_container
from .errors import ConfigError, ContractError, EmptyFixationsError
from .numerics import GridSpec, Tensor, gaussian2d

SCENE_VERSION = "mvs-1"

BACKGROUND = -1  # speaker id for background-voiced turns


@dataclass
class FaceTrack:
    """One face: static identity, per-frame box, feature and speaking label."""

    face_id: int
    boxes: np.ndarray  # (T, 4) int: x, y, w, h
    features: np.ndarray  # (T, d_f)
    speaking: np.ndarray  # (T,) int, values in {0, 1}
    first_frame: int = 0


@dataclass
class SceneSequence:
    scene_id: str
    grid: GridSpec
    faces: list
    visual_features: np.ndarray  # (T, d_v)
    audio_features: np.ndarray  # (T, d_a)
    fixations: list  # per frame: (S, 2) int array of (x, y)
    density: np.ndarray  # (T, H, W), each frame sums to 1
    background_voiced: np.ndarray  # (T,) int, 1 when no face carries the sound

    @property
    def frame_count(self):
        return self.visual_features.shape[0]

    @property
    def face_count(self):
        return len(self.faces)

    def speaker_ids(self):
        """Per frame: speaking face id, or BACKGROUND when none speaks."""
        T = self.frame_count
        out = np.full(T, BACKGROUND, dtype=np.int64)
        for track in self.faces:
            out[track.speaking == 1] = track.face_id
        return out

    def labels(self):
        """(N, T) speaking labels in face-id order."""
        return np.stack([f.speaking for f in sorted(self.faces, key=lambda f: f.face_id)])

    def validate(self):
        T = self.frame_count
        W, H = self.grid.width, self.grid.height
        for track in self.faces:
            x, y, w, h = (track.boxes[:, i] for i in range(4))
            if (w <= 0).any() or (h <= 0).any():
                raise ContractError(f"face {track.face_id} has a degenerate box")
            if (x < 0).any() or (y < 0).any() or (x + w > W).any() or (y + h > H).any():
                raise ContractError(f"face {track.face_id} box leaves the frame")
        for t, pts in enumerate(self.fixations):
            if len(pts) == 0:
                raise ContractError(f"frame {t} has no fixations")
            if (pts[:, 0] < 0).any() or (pts[:, 0] >= W).any() or (pts[:, 1] < 0).any() or (pts[:, 1] >= H).any():
                raise ContractError(f"frame {t} has fixations off the grid")
        sums = self.density.reshape(T, -1).sum(axis=1)
        if not np.allclose(sums, 1.0, atol=1e-6):
            raise ContractError("density frames must each sum to 1")
        if not np.isfinite(self.visual_features).all() or not np.isfinite(self.audio_features).all():
            raise ContractError("non-finite feature values")
        return self


@dataclass
class GeneratorConfig:
    face_count: int = 3
    frame_count: int = 10
    width: int = 64
    height: int = 48
    face_dim: int = 32
    visual_dim: int = 16
    audio_dim: int = 16
    turn_min: int = 3
    turn_max: int = 6
    fixations_per_frame: int = 16
    on_target_fraction: float = 0.738
    attention_lag: int = 1
    snr: float = 4.0
    background_voiced_prob: float = 0.0
    density_blur_frac: float = 0.03
    basis_seed: int = 7
    seed: int = 0

    def validate(self):
        if self.face_count < 1 or self.frame_count < 1:
            raise ConfigError("face and frame counts must be >= 1")
        if self.width < 8 or self.height < 8:
            raise ConfigError("grid must be at least 8x8 pixels")
        if min(self.face_dim, self.visual_dim, self.audio_dim) < 1:
            raise ConfigError("feature dims must be >= 1")
        if not 1 <= self.turn_min <= self.turn_max:
            raise ConfigError("turn lengths need 1 <= turn_min <= turn_max")
        if self.fixations_per_frame < 1:
            raise ConfigError("need at least one fixation per frame")
        if self.width / self.face_count < 10:
            raise ConfigError(
                f"grid width {self.width} too narrow for {self.face_count} faces"
            )
        for name in ("on_target_fraction", "background_voiced_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must lie in [0,1], got {v}")
        if self.attention_lag < 0:
            raise ConfigError("attention lag must be >= 0")
        if self.snr < 0:
            raise ConfigError("snr must be >= 0")
        return self


def _unit(rng, dim):
    v = rng.normal(size=dim)
    return v / np.linalg.norm(v)


@dataclass
class _Basis:
    face: np.ndarray
    audio_active: np.ndarray
    audio_background: np.ndarray
    visual_background: np.ndarray


def _planting_basis(cfg):
    rng = np.random.default_rng(cfg.basis_seed)
    return _Basis(
        face=_unit(rng, cfg.face_dim),
        audio_active=_unit(rng, cfg.audio_dim),
        audio_background=_unit(rng, cfg.audio_dim),
        visual_background=_unit(rng, cfg.visual_dim),
    )


def _layout_boxes(cfg, rng):
    """Non-overlapping boxes, one per face, jittered within horizontal slots."""
    slot = cfg.width / cfg.face_count
    boxes = []
    for n in range(cfg.face_count):
        w = max(4, int(slot * rng.uniform(0.45, 0.6)))
        h = max(5, min(int(w * rng.uniform(1.15, 1.4)), int(cfg.height * 0.7)))
        cx = slot * (n + 0.5) + rng.uniform(-0.08, 0.08) * slot
        cy = cfg.height * rng.uniform(0.4, 0.55)
        x = int(round(cx - w / 2.0))
        y = int(round(cy - h / 2.0))
        x = min(max(x, int(n * slot) + 1), int((n + 1) * slot) - w - 1)
        y = min(max(y, 1), cfg.height - h - 1)
        boxes.append((x, y, w, h))
    return boxes


def _speaking_turns(cfg, rng):
    """Per-frame speaker id; BACKGROUND marks background-voiced turns."""
    T = cfg.frame_count
    speaker = np.empty(T, dtype=np.int64)
    t = 0
    prev = None
    while t < T:
        length = int(rng.integers(cfg.turn_min, cfg.turn_max + 1))
        if cfg.background_voiced_prob > 0 and rng.random() < cfg.background_voiced_prob:
            cur = BACKGROUND
        else:
            choices = [n for n in range(cfg.face_count) if n != prev]
            cur = int(choices[rng.integers(len(choices))]) if choices else 0
        speaker[t : t + length] = cur
        prev = cur if cur != BACKGROUND else prev
        t += length
    return speaker


def _point_in_box(rng, box):
    x, y, w, h = box
    px = x + min(w - 1, max(0, rng.normal(w / 2.0, w / 5.0)))
    py = y + min(h - 1, max(0, rng.normal(h / 2.0, h / 5.0)))
    return int(px), int(py)


def _point_off_faces(rng, cfg, boxes):
    for _ in range(1000):
        px = int(rng.integers(cfg.width))
        py = int(rng.integers(cfg.height))
        if not any(bx <= px < bx + bw and by <= py < by + bh for bx, by, bw, bh in boxes):
            return px, py
    raise ConfigError("face boxes cover the frame; no background left for fixations")


def generate_scene(cfg, scene_id=None):
    """Deterministically generate one labeled scene from (config, seed)."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    basis = _planting_basis(cfg)
    N, T = cfg.face_count, cfg.frame_count
    grid = GridSpec(cfg.width, cfg.height)
    boxes = _layout_boxes(cfg, rng)
    speaker = _speaking_turns(cfg, rng)
    background_voiced = (speaker == BACKGROUND).astype(np.int64)

    labels = np.zeros((N, T), dtype=np.int64)
    for t in range(T):
        if speaker[t] != BACKGROUND:
            labels[speaker[t], t] = 1

    face_feats = rng.normal(size=(N, T, cfg.face_dim))
    face_feats += cfg.snr * labels[:, :, None] * basis.face[None, None, :]
    has_speaker = (speaker != BACKGROUND).astype(np.float64)
    audio_feats = rng.normal(size=(T, cfg.audio_dim))
    audio_feats += cfg.snr * (
        has_speaker[:, None] * basis.audio_active[None, :]
        + background_voiced[:, None] * basis.audio_background[None, :]
    )
    visual_feats = rng.normal(size=(T, cfg.visual_dim))
    visual_feats += cfg.snr * background_voiced[:, None] * basis.visual_background[None, :]

    # attention follows the speaker with the configured lag; background turns
    # push attention off the faces entirely
    target = np.array([speaker[max(0, t - cfg.attention_lag)] for t in range(T)])
    fixations = []
    for t in range(T):
        pts = np.empty((cfg.fixations_per_frame, 2), dtype=np.int64)
        for s in range(cfg.fixations_per_frame):
            on_target = target[t] != BACKGROUND and rng.random() < cfg.on_target_fraction
            if on_target:
                pts[s] = _point_in_box(rng, boxes[target[t]])
            else:
                pts[s] = _point_off_faces(rng, cfg, boxes)
        fixations.append(pts)

    blur = cfg.density_blur_frac * cfg.width
    density = np.stack(
        [fixation_density(pts, blur, grid).numpy() for pts in fixations]
    )

    tracks = [
        FaceTrack(
            face_id=n,
            boxes=np.tile(np.array(boxes[n], dtype=np.int64), (T, 1)),
            features=face_feats[n],
            speaking=labels[n],
        )
        for n in range(N)
    ]
    scene = SceneSequence(
        scene_id=scene_id or f"scene-{cfg.seed}",
        grid=grid,
        faces=tracks,
        visual_features=visual_feats,
        audio_features=audio_feats,
        fixations=fixations,
        density=density,
        background_voiced=background_voiced,
    )
    return scene.validate()


def fixation_density(points, blur_sigma, grid):
    """Sum of per-fixation isotropic Gaussians, renormalized to unit mass."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if pts.shape[0] == 0:
        raise EmptyFixationsError("cannot build a density from zero fixations")
    xs, ys = grid.coords()
    s2 = 2.0 * blur_sigma * blur_sigma
    acc = np.zeros((grid.height, grid.width))
    for px, py in pts:
        acc += np.exp(-((xs - px) ** 2 + (ys - py) ** 2) / s2)
    return Tensor(acc / acc.sum())


# -- serialization -------------------------------------------------------------


def write_scene(scene, path):
    header = {
        "scene_id": scene.scene_id,
        "T": scene.frame_count,
        "N": scene.face_count,
        "width": scene.grid.width,
        "height": scene.grid.height,
        "dims": {
            "face": int(scene.faces[0].features.shape[1]),
            "visual": int(scene.visual_features.shape[1]),
            "audio": int(scene.audio_features.shape[1]),
        },
        "boxes": [f.boxes.tolist() for f in scene.faces],
        "speaking": [f.speaking.tolist() for f in scene.faces],
        "first_frame": [f.first_frame for f in scene.faces],
        "background_voiced": scene.background_voiced.tolist(),
        "fixations": [pts.tolist() for pts in scene.fixations],
    }
    arrays = [
        ("audio_features", scene.audio_features),
        ("density", scene.density),
        ("face_features", np.stack([f.features for f in scene.faces])),
        ("visual_features", scene.visual_features),
    ]
    write_container(path, SCENE_VERSION, header, arrays)


def read_scene(path):
    header, arrays = read_container(path, SCENE_VERSION)
    T, N = int(header["T"]), int(header["N"])
    grid = GridSpec(int(header["width"]), int(header["height"]))
    face_features = arrays["face_features"]
    tracks = [
        FaceTrack(
            face_id=n,
            boxes=np.asarray(header["boxes"][n], dtype=np.int64),
            features=face_features[n],
            speaking=np.asarray(header["speaking"][n], dtype=np.int64),
            first_frame=int(header["first_frame"][n]),
        )
        for n in range(N)
    ]
    scene = SceneSequence(
        scene_id=str(header["scene_id"]),
        grid=grid,
        faces=tracks,
        visual_features=arrays["visual_features"],
        audio_features=arrays["audio_features"],
        fixations=[np.asarray(p, dtype=np.int64).reshape(-1, 2) for p in header["fixations"]],
        density=arrays["density"].reshape(T, grid.height, grid.width),
        background_voiced=np.asarray(header["background_voiced"], dtype=np.int64),
    )
    return scene.validate()


def scenes_equal(a, b):
    """Exact equality of two scenes, payload bits included."""
    if (a.scene_id, a.grid, a.frame_count, a.face_count) != (
        b.scene_id,
        b.grid,
        b.frame_count,
        b.face_count,
    ):
        return False
    for fa, fb in zip(a.faces, b.faces):
        if fa.face_id != fb.face_id or fa.first_frame != fb.first_frame:
            return False
        if not (
            np.array_equal(fa.boxes, fb.boxes)
            and np.array_equal(fa.features, fb.features)
            and np.array_equal(fa.speaking, fb.speaking)
        ):
            return False
    return (
        np.array_equal(a.visual_features, b.visual_features)
        and np.array_equal(a.audio_features, b.audio_features)
        and all(np.array_equal(p, q) for p, q in zip(a.fixations, b.fixations))
        and np.array_equal(a.density, b.density)
        and np.array_equal(a.background_voiced, b.background_voiced)
    )
