"""Evaluation metrics and gaze-behavior analysis procedures.

Saliency: AUC (Judd style — fixated pixels positive, every other pixel
negative, ROC swept over all distinct saliency values, which equals the
tie-corrected Mann-Whitney statistic), NSS, CC and KL sharing the loss
kernels bit for bit. Sound localization: box/map IoU, the area under the
IoU-vs-binarization-threshold curve, per-video classification accuracy and
interpolated average precision of the voiced class.

Analysis: split-half subject consistency, same-face fixation proportion,
fixation dispersion, contextual NSS at landmark points, and the attention
transition time after speaker changes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DegenerateMapError, GeometryError
from .losses import cc_frame, kl_loss, nss_frame
from .render import binarize, region_owner_grid
from .synthdata import fixation_density

EXCLUDED = float("nan")


@dataclass(frozen=True)
class BoundingBox:
    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        if self.w <= 0 or self.h <= 0:
            raise GeometryError(f"box needs positive extents, got {self}")

    @property
    def area(self):
        return self.w * self.h


# -- saliency metrics -------------------------------------------------------


def auc_judd(saliency, fixation_points):
    """ROC area with fixated pixels as positives and all others negatives.

    Sweeping every distinct saliency value as a threshold and integrating
    the ROC curve trapezoidally handles ties exactly, so the result equals
    the pair-counting Mann-Whitney statistic.
    """
    s = np.asarray(saliency, dtype=np.float64)
    pts = np.asarray(fixation_points, dtype=np.int64).reshape(-1, 2)
    if pts.shape[0] == 0:
        raise ContractError("AUC needs at least one fixation")
    h, w = s.shape
    mask = np.zeros((h, w), dtype=bool)
    mask[pts[:, 1], pts[:, 0]] = True
    pos = np.sort(s[mask])
    neg = np.sort(s[~mask])
    if pos.size == 0 or neg.size == 0:
        raise ContractError("AUC needs both fixated and non-fixated pixels")
    thresholds = np.unique(s)[::-1]
    # fraction of each class at or above every threshold
    tpr = 1.0 - np.searchsorted(pos, thresholds, side="left") / pos.size
    fpr = 1.0 - np.searchsorted(neg, thresholds, side="left") / neg.size
    tpr = np.concatenate([[0.0], tpr, [1.0]])
    fpr = np.concatenate([[0.0], fpr, [1.0]])
    return float(np.trapezoid(tpr, fpr))


def saliency_metrics(predicted, target, fixations):
    """Per-frame (AUC, NSS, CC, KL) plus aggregates with exclusion counts.

    Frames where a constant prediction makes NSS or CC undefined contribute
    NaN to the per-frame lists and are excluded from the aggregates; the
    count of exclusions is reported.
    """
    s = np.asarray(predicted, dtype=np.float64)
    g = np.asarray(target, dtype=np.float64)
    if s.shape != g.shape or len(fixations) != s.shape[0]:
        raise ContractError("prediction, target and fixations must align per frame")
    rows = []
    excluded = 0
    for t in range(s.shape[0]):
        auc = auc_judd(s[t], fixations[t])
        try:
            nss = nss_frame(s[t], fixations[t]).item()
            cc = cc_frame(s[t], g[t]).item()
        except DegenerateMapError:
            nss = EXCLUDED
            cc = EXCLUDED
            excluded += 1
        kl = kl_loss(s[t : t + 1], g[t : t + 1]).item()
        rows.append((auc, nss, cc, kl))
    arr = np.asarray(rows)
    valid = ~np.isnan(arr)
    agg = tuple(
        float(arr[:, i][valid[:, i]].mean()) if valid[:, i].any() else EXCLUDED
        for i in range(4)
    )
    return {
        "frames": rows,
        "auc": agg[0],
        "nss": agg[1],
        "cc": agg[2],
        "kl": agg[3],
        "excluded": excluded,
    }


# -- sound-source localization metrics ------------------------------------------


def iou(binary_a, binary_b):
    """Intersection over union of two binary maps; both empty counts as 0."""
    a = np.asarray(binary_a, dtype=bool)
    b = np.asarray(binary_b, dtype=bool)
    if a.shape != b.shape:
        raise ContractError(f"grids differ: {a.shape} vs {b.shape}")
    union = float(np.logical_or(a, b).sum())
    if union == 0:
        return 0.0
    return float(np.logical_and(a, b).sum()) / union


def auc_s(source_map, target_binary, thresholds=None):
    """Area under IoU vs relative binarization threshold, trapezoidal on [0,1]."""
    if thresholds is None:
        thresholds = np.linspace(0.0, 1.0, 101)
    taus = np.asarray(thresholds, dtype=np.float64)
    if taus[0] != 0.0 or taus[-1] != 1.0 or (np.diff(taus) <= 0).any():
        raise ContractError("threshold grid must increase and cover [0,1]")
    vals = [iou(binarize(source_map, t), target_binary) for t in taus]
    return float(np.trapezoid(vals, taus))


def mean_overlap(box_a, box_b):
    """Bounding-box intersection area over union area."""
    ax2, ay2 = box_a.x + box_a.w, box_a.y + box_a.h
    bx2, by2 = box_b.x + box_b.w, box_b.y + box_b.h
    iw = max(0.0, min(ax2, bx2) - max(box_a.x, box_b.x))
    ih = max(0.0, min(ay2, by2) - max(box_a.y, box_b.y))
    inter = iw * ih
    union = box_a.area + box_b.area - inter
    return inter / union


def average_precision(confidences, labels):
    """Every-point interpolated AP of the positive class.

    Ranked by confidence descending (stable under ties, hence invariant to
    strictly monotone confidence transforms). Returns NaN when there are no
    positives to recall.
    """
    conf = np.asarray(confidences, dtype=np.float64).reshape(-1)
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    if conf.size == 0 or conf.size != y.size:
        raise ContractError("need aligned, nonempty confidences and labels")
    npos = int(y.sum())
    if npos == 0:
        return EXCLUDED
    order = np.argsort(-conf, kind="stable")
    tp = np.cumsum(y[order] == 1)
    fp = np.cumsum(y[order] == 0)
    recall = tp / npos
    precision = tp / (tp + fp)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    prev_r = 0.0
    ap = 0.0
    for r, p in zip(recall, envelope):
        ap += (r - prev_r) * p
        prev_r = r
    return float(ap)


def detection_scores(per_video):
    """(Acc, mAP) over videos.

    ``per_video`` is a list of (predicted labels, confidences, true labels)
    triples, each flattened over the video's (face, frame) slots. Accuracy
    is the correct fraction per video averaged across videos; mAP averages
    the voiced-class AP per video, excluding videos with no voiced slot.
    """
    if not per_video:
        raise ContractError("need at least one video")
    accs = []
    aps = []
    skipped = 0
    for yhat, conf, y in per_video:
        yhat = np.asarray(yhat, dtype=np.int64).reshape(-1)
        y = np.asarray(y, dtype=np.int64).reshape(-1)
        if yhat.size == 0 or yhat.size != y.size:
            raise ContractError("empty or misaligned label sequences")
        accs.append(float((yhat == y).mean()))
        ap = average_precision(conf, y)
        if np.isnan(ap):
            skipped += 1
        else:
            aps.append(ap)
    mean_ap = float(np.mean(aps)) if aps else EXCLUDED
    return float(np.mean(accs)), mean_ap, skipped


# -- gaze-behavior analysis --------------------------------------------------


def _modal_face(points, owner):
    """Face region holding the most of these fixations, or -1 if none inside."""
    owners = owner[points[:, 1], points[:, 0]]
    faces = owners[owners >= 0]
    if faces.size == 0:
        return -1
    counts = np.bincount(faces)
    return int(counts.argmax())


def consistency_stats(subject_tracks, boxes, grid, seed=0, trials=20, blur_sigma=None):
    """Split-half consistency of subjects plus the same-face proportion.

    ``subject_tracks[s]`` holds subject s's per-frame fixation points. Each
    trial splits the subjects into random halves and correlates the halves'
    per-frame fixation densities; the same-face proportion is the fraction
    of all fixations landing in each frame's modal face region.
    """
    n_subjects = len(subject_tracks)
    if n_subjects < 2:
        raise ContractError("split-half consistency needs at least 2 subjects")
    frames = len(subject_tracks[0])
    if any(len(track) != frames for track in subject_tracks):
        raise ContractError("subject tracks must cover the same frames")
    if blur_sigma is None:
        blur_sigma = 0.03 * grid.width
    rng = np.random.default_rng(seed)
    ccs = []
    for _ in range(trials):
        perm = rng.permutation(n_subjects)
        half = n_subjects // 2
        group_a = perm[:half]
        group_b = perm[half : 2 * half]
        per_frame = []
        for t in range(frames):
            pts_a = np.concatenate([subject_tracks[s][t].reshape(-1, 2) for s in group_a])
            pts_b = np.concatenate([subject_tracks[s][t].reshape(-1, 2) for s in group_b])
            da = fixation_density(pts_a, blur_sigma, grid).numpy()
            db = fixation_density(pts_b, blur_sigma, grid).numpy()
            per_frame.append(cc_frame(da, db).item())
        ccs.append(float(np.mean(per_frame)))
    owner = region_owner_grid(grid, boxes)
    in_modal = 0
    total = 0
    for t in range(frames):
        pts = np.concatenate([track[t].reshape(-1, 2) for track in subject_tracks])
        modal = _modal_face(pts, owner)
        owners = owner[pts[:, 1], pts[:, 0]]
        in_modal += int((owners == modal).sum()) if modal >= 0 else 0
        total += pts.shape[0]
    return {
        "cc_mean": float(np.mean(ccs)),
        "cc_std": float(np.std(ccs)),
        "same_face": in_modal / total,
        "trials": trials,
    }


def dispersion(points):
    """Mean pairwise Euclidean distance of fixation points, in pixels."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    n = pts.shape[0]
    if n < 2:
        raise ContractError("dispersion needs at least 2 points")
    diff = pts[:, None, :] - pts[None, :, :]
    d = np.sqrt((diff**2).sum(axis=2))
    iu = np.triu_indices(n, k=1)
    return float(d[iu].mean())


def fixations_in_regions(points, boxes, grid):
    """Subset of points lying inside any face region."""
    pts = np.asarray(points, dtype=np.int64).reshape(-1, 2)
    owner = region_owner_grid(grid, boxes)
    keep = owner[pts[:, 1], pts[:, 0]] >= 0
    return pts[keep]


def contextual_nss(heat_map, points):
    """Standardized map value summed at the supplied points.

    Shares the NSS loss kernel, so results agree bit for bit with the
    training-side computation on identical inputs.
    """
    return nss_frame(np.asarray(heat_map, dtype=np.float64), points).item()


def transition_time(per_frame_fixations, speaker_ids, boxes, grid):
    """Average frames for the modal fixation face to reach a new speaker.

    Events are frames where the speaking face changes to another face. An
    event whose fixations never reach the new speaker before the next event
    (or the end) is excluded and counted. Raises when no events exist.
    """
    speaker = np.asarray(speaker_ids, dtype=np.int64)
    frames = len(per_frame_fixations)
    if speaker.shape[0] != frames:
        raise ContractError("speaker ids and fixations must align per frame")
    owner = region_owner_grid(grid, boxes)
    events = [
        t
        for t in range(1, frames)
        if speaker[t] != speaker[t - 1] and speaker[t] >= 0
    ]
    if not events:
        raise ContractError("no speaker-change events in the sequence")
    modal = [
        _modal_face(np.asarray(per_frame_fixations[t]).reshape(-1, 2), owner)
        for t in range(frames)
    ]
    lags = []
    excluded = 0
    bounds = events[1:] + [frames]
    for start, stop in zip(events, bounds):
        new_speaker = speaker[start]
        lag = next(
            (d for d in range(stop - start) if modal[start + d] == new_speaker), None
        )
        if lag is None:
            excluded += 1
        else:
            lags.append(lag)
    mean_lag = float(np.mean(lags)) if lags else EXCLUDED
    return {
        "mean_frames": mean_lag,
        "events": len(events),
        "excluded": excluded,
    }


# -- report ----------------------------------------------------------------------


@dataclass
class EvalReport:
    """Per-scene and aggregate scores, emitted as diff-stable text."""

    scenes: list = field(default_factory=list)  # (scene_id, ordered dict of floats)
    aggregate: dict = field(default_factory=dict)

    FIELDS = ("auc", "nss", "cc", "kl", "iou", "auc_s", "acc", "map")

    def add_scene(self, scene_id, values):
        self.scenes.append((scene_id, dict(values)))

    def finalize(self, extra=None):
        agg = {}
        for name in self.FIELDS:
            vals = [v[name] for _, v in self.scenes if not np.isnan(v.get(name, np.nan))]
            agg[name] = float(np.mean(vals)) if vals else EXCLUDED
        if extra:
            agg.update(extra)
        self.aggregate = agg
        return self

    def to_text(self):
        lines = []
        for scene_id, values in self.scenes:
            parts = " ".join(f"{k}={fmt_float(values[k])}" for k in self.FIELDS if k in values)
            lines.append(f"scene {scene_id} {parts}")
        parts = " ".join(f"{k}={fmt_float(v)}" for k, v in sorted(self.aggregate.items()))
        lines.append(f"aggregate {parts}")
        return "\n".join(lines) + "\n"


def fmt_float(v):
    """Stable, diff-friendly float formatting for text reports."""
    if isinstance(v, float):
        return repr(round(v, 12))
    return str(v)
