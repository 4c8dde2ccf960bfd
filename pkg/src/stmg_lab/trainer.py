"""Joint training loop, Adam optimizer, evaluation and analysis pipelines.

A training step runs every scene of the batch through graph construction,
the attention network, saliency rendering and the full loss stack, then
applies one Adam update. A warm-up phase optimizes the classification loss
alone before joint training (mirroring the staged initialization of the
speaking-class head), after which the combined objective takes over.

Everything is deterministic given (config, seed): parameter init, batch
order, and therefore checkpoints, reports and rendered maps.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import losses as lo
from . import metrics as me
from . import numerics as nm
from . import render as re_
from .errors import ConfigError, ContractError
from .gatnet import (
    StmgNetworkParams,
    attention_weights_for_saliency,
    classify_nodes,
    init_stmg_params,
    load_checkpoint,
    save_checkpoint,
    stmg_forward,
)
from .graph import StmgGraph, audio_node, face_node, visual_node
from .numerics import GradTape, Tensor
from .render import RefinerParams


@dataclass
class TrainConfig:
    clip_len: int = 20
    batch_size: int = 8
    lr: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    weights: lo.LossWeights = field(default_factory=lo.LossWeights)
    epochs: int = 4
    warmup_epochs: int = 1
    seed: int = 0
    embed_dim: int = 32
    heads: int = 2
    layers: int = 2
    reweight: float = 0.2
    slope: float = 0.2
    literal_signs: bool = False
    refiner_noise: float = 0.01
    iou_threshold: float = 0.25
    attention_mode: str = "mean"

    def validate(self):
        if self.clip_len < 2:
            raise ConfigError("clip length must be >= 2")
        if self.lr < 0:
            raise ConfigError("learning rate must be >= 0")
        if self.batch_size < 1 or self.epochs < 0 or self.warmup_epochs < 0:
            raise ConfigError("batch size must be >= 1 and epoch counts >= 0")
        if self.warmup_epochs > self.epochs:
            raise ConfigError("warm-up epochs cannot exceed total epochs")
        if self.attention_mode not in ("mean", "head1"):
            raise ConfigError(f"unknown attention mode {self.attention_mode!r}")
        return self

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, doc):
        doc = dict(doc)
        weights = doc.pop("weights", None)
        cfg = cls(**doc)
        if weights is not None:
            cfg.weights = lo.LossWeights(**weights)
        return cfg.validate()


class Adam:
    """Standard Adam with bias correction; parameter order is fixed by name."""

    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = dict(sorted(params.items()))
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            self.m[name] = b1 * self.m[name] + (1 - b1) * g
            self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            m_hat = self.m[name] / (1 - b1**self.t)
            v_hat = self.v[name] / (1 - b2**self.t)
            p.data = p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


@dataclass
class ModelBundle:
    """Attention network plus saliency refiner: everything the tasks train."""

    network: StmgNetworkParams
    refiner: RefinerParams

    def parameters(self):
        out = {f"net.{k}": v for k, v in self.network.parameters().items()}
        out.update(self.refiner.parameters())
        return out


def init_bundle(scene, cfg, rng=None):
    rng = rng or np.random.default_rng(cfg.seed)
    network = init_stmg_params(
        face_dim=scene.faces[0].features.shape[1],
        visual_dim=scene.visual_features.shape[1],
        audio_dim=scene.audio_features.shape[1],
        embed_dim=cfg.embed_dim,
        heads=cfg.heads,
        layers=cfg.layers,
        reweight=cfg.reweight,
        slope=cfg.slope,
        rng=rng,
    )
    refiner = RefinerParams.init(rng, noise=cfg.refiner_noise, slope=cfg.slope)
    return ModelBundle(network=network, refiner=refiner)


def save_bundle(path, bundle, extra=None):
    save_checkpoint(
        path,
        bundle.network,
        extra=extra,
        extra_tensors=bundle.refiner.parameters(),
    )


def load_bundle(path):
    network, header, leftovers = load_checkpoint(path)
    ref = RefinerParams.identity()
    named = ref.parameters()
    missing = set(named) - set(leftovers)
    if missing:
        raise ContractError(f"checkpoint lacks refiner tensors: {sorted(missing)}")
    for name, tensor in named.items():
        stored = leftovers[name]
        if stored.shape != tensor.data.shape:
            raise ContractError(
                f"checkpoint tensor {name} has shape {stored.shape}, "
                f"expected {tensor.data.shape}"
            )
        tensor.data = stored
    return ModelBundle(network=network, refiner=ref), header.get("extra", {})


# -- scene plumbing -----------------------------------------------------------


def scene_graph(scene):
    return StmgGraph(
        scene.frame_count, {f.face_id: f.first_frame for f in scene.faces}
    )


def scene_features(scene):
    feats = {}
    for track in scene.faces:
        for t in range(track.first_frame, scene.frame_count):
            feats[face_node(track.face_id, t)] = Tensor(track.features[t])
    for t in range(scene.frame_count):
        feats[visual_node(t)] = Tensor(scene.visual_features[t])
        feats[audio_node(t)] = Tensor(scene.audio_features[t])
    return feats


def _frame_labels(scene, t):
    """Speaking labels in spatial node order: faces ascending, then background."""
    ys = [f.speaking[t] for f in sorted(scene.faces, key=lambda f: f.face_id)]
    return np.array(ys + [scene.background_voiced[t]], dtype=np.float64)


def forward_scene(scene, bundle, cfg, collect_audit=False):
    """Run the full pipeline on one scene and return every loss component."""
    graph = scene_graph(scene)
    out = stmg_forward(graph, scene_features(scene), bundle.network, collect_audit)
    probs = []
    labels = []
    for t in range(scene.frame_count):
        lg = out.logits[t]
        diff = nm.getitem(lg, (slice(None), 1)) - nm.getitem(lg, (slice(None), 0))
        probs.append(nm.sigmoid(diff))
        labels.append(_frame_labels(scene, t))
    bce = lo.bce_loss(nm.concat(probs), np.concatenate(labels))
    target = lo.attention_targets(scene)
    predicted_alpha = out.attention.stacked(cfg.attention_mode)
    att = lo.att_loss(target, predicted_alpha)
    sound = lo.sound_loss(bce, att, cfg.weights.gamma1)
    weights = attention_weights_for_saliency(out.attention, cfg.attention_mode)
    saliency = re_.predict_saliency(scene, weights, bundle.refiner)
    kl = lo.kl_loss(saliency, scene.density)
    nss = lo.nss_loss(saliency, scene.fixations)
    cc = lo.cc_loss(saliency, scene.density)
    sal = lo.saliency_loss(
        kl, nss, cc, cfg.weights.beta1, cfg.weights.beta2, cfg.literal_signs
    )
    total = lo.total_loss(sal, sound, cfg.weights.gamma2)
    return {
        "bce": bce,
        "att": att,
        "sound": sound,
        "kl": kl,
        "nss": nss,
        "cc": cc,
        "saliency": sal,
        "total": total,
        "output": out,
        "saliency_maps": saliency,
    }


LOSS_KEYS = ("total", "saliency", "sound", "bce", "att", "kl", "nss", "cc")


def train_step(batch, bundle, cfg, opt, warmup=False):
    """One optimizer update over a batch of scenes; returns the loss breakdown.

    Aborts with the offending scene id if any component goes non-finite.
    Inputs other than the parameter store are never mutated.
    """
    params = bundle.parameters()
    breakdown = {k: 0.0 for k in LOSS_KEYS}
    with GradTape() as tape:
        objective = None
        for scene in batch:
            parts = forward_scene(scene, bundle, cfg)
            for k in LOSS_KEYS:
                v = float(parts[k].data)
                if not np.isfinite(v):
                    raise ContractError(
                        f"non-finite {k} loss on scene {scene.scene_id!r}: "
                        + ", ".join(
                            f"{kk}={float(parts[kk].data)!r}" for kk in LOSS_KEYS
                        )
                    )
                breakdown[k] += v / len(batch)
            term = parts["bce"] if warmup else parts["total"]
            objective = term if objective is None else objective + term
        objective = objective * (1.0 / len(batch))
        tape.backward(objective, params=list(params.values()))
    opt.step()
    return breakdown


def _epoch_batches(scenes, batch_size, rng):
    order = rng.permutation(len(scenes))
    for start in range(0, len(order), batch_size):
        yield [scenes[i] for i in order[start : start + batch_size]]


def train(scenes, cfg, inputs_hash=""):
    """Full run: warm-up epochs on the classification loss, then joint epochs.

    Returns (bundle, manifest dict). The manifest snapshots the config, the
    input content hash and the per-epoch mean loss components.
    """
    cfg.validate()
    if not scenes:
        raise ConfigError("no scenes to train on")
    rng = np.random.default_rng(cfg.seed)
    bundle = init_bundle(scenes[0], cfg, rng)
    opt = Adam(
        bundle.parameters(),
        lr=cfg.lr,
        beta1=cfg.adam_beta1,
        beta2=cfg.adam_beta2,
        eps=cfg.adam_eps,
    )
    log = []
    for epoch in range(cfg.epochs):
        warmup = epoch < cfg.warmup_epochs
        sums = {k: 0.0 for k in LOSS_KEYS}
        steps = 0
        for batch in _epoch_batches(scenes, cfg.batch_size, rng):
            breakdown = train_step(batch, bundle, cfg, opt, warmup=warmup)
            for k in LOSS_KEYS:
                sums[k] += breakdown[k]
            steps += 1
        entry = {"epoch": epoch, "phase": "warmup" if warmup else "joint"}
        entry.update({k: sums[k] / steps for k in LOSS_KEYS})
        log.append(entry)
    manifest = build_manifest(cfg, inputs_hash, log)
    return bundle, manifest


def build_manifest(cfg, inputs_hash, epoch_log):
    return {
        "config": cfg.to_dict(),
        "inputs_hash": inputs_hash,
        "epochs": epoch_log,
    }


def manifest_text(manifest):
    return json.dumps(manifest, sort_keys=True, indent=2) + "\n"


def hash_inputs(paths):
    """Content hash over the input files, order-independent."""
    digest = hashlib.sha256()
    for p in sorted(str(p) for p in paths):
        digest.update(p.encode("utf-8"))
        with open(p, "rb") as fh:
            digest.update(fh.read())
    return digest.hexdigest()


# -- evaluation ---------------------------------------------------------------


def _gt_source_mask(scene, t):
    mask = np.zeros((scene.grid.height, scene.grid.width))
    for track in scene.faces:
        if track.speaking[t]:
            x, y, w, h = track.boxes[t]
            mask[y : y + h, x : x + w] = 1.0
    return mask


def predict_scene(scene, bundle, cfg):
    """Inference products for one scene: labels, confidences, maps."""
    out_parts = forward_scene(scene, bundle, cfg)
    out = out_parts["output"]
    n = scene.face_count
    yhat = np.zeros((scene.frame_count, n), dtype=np.int64)
    conf = np.zeros((scene.frame_count, n))
    for t in range(scene.frame_count):
        face_logits = out.logits[t].data[:n]
        yhat[t], conf[t] = classify_nodes(face_logits)
    gaussians = [re_.face_gaussian(f.boxes[0]) for f in scene.faces]
    source_maps = np.stack(
        [
            re_.sound_source_map(yhat[t], gaussians, scene.grid)
            for t in range(scene.frame_count)
        ]
    )
    return {
        "yhat": yhat,
        "conf": conf,
        "source_maps": source_maps,
        "saliency": out_parts["saliency_maps"].data,
        "losses": {k: float(out_parts[k].data) for k in LOSS_KEYS},
    }


def evaluate_scene(scene, bundle, cfg):
    pred = predict_scene(scene, bundle, cfg)
    labels = scene.labels().T  # (T, N)
    ious = []
    aucs = []
    for t in range(scene.frame_count):
        gt = _gt_source_mask(scene, t)
        ious.append(
            me.iou(re_.binarize(pred["source_maps"][t], cfg.iou_threshold), gt)
        )
        aucs.append(me.auc_s(pred["source_maps"][t], gt))
    sal = me.saliency_metrics(pred["saliency"], scene.density, scene.fixations)
    acc = float((pred["yhat"] == labels).mean())
    ap = me.average_precision(pred["conf"].reshape(-1), labels.reshape(-1))
    values = {
        "auc": sal["auc"],
        "nss": sal["nss"],
        "cc": sal["cc"],
        "kl": sal["kl"],
        "iou": float(np.mean(ious)),
        "auc_s": float(np.mean(aucs)),
        "acc": acc,
        "map": ap,
        "excluded_frames": sal["excluded"],
    }
    return values, pred


def evaluate(scenes, bundle, cfg):
    """EvalReport over scenes; Acc and mAP average per video then over videos."""
    report = me.EvalReport()
    per_video = []
    for scene in scenes:
        values, pred = evaluate_scene(scene, bundle, cfg)
        report.add_scene(scene.scene_id, values)
        labels = scene.labels().T
        per_video.append((pred["yhat"].reshape(-1), pred["conf"].reshape(-1), labels.reshape(-1)))
    acc, mean_ap, skipped = me.detection_scores(per_video)
    report.finalize(extra={"acc": acc, "map": mean_ap, "map_skipped_videos": skipped})
    return report


# -- behavioral analysis -----------------------------------------------------


def subject_tracks(scene):
    """Per-subject fixation tracks; subject s owns fixation s of every frame."""
    counts = {pts.shape[0] for pts in scene.fixations}
    if len(counts) != 1:
        raise ContractError("frames disagree on fixation count; no subject tracks")
    s = counts.pop()
    return [[scene.fixations[t][i] for t in range(scene.frame_count)] for i in range(s)]


def analyze(scenes, seed=0, trials=20):
    """The gaze-statistics suite over a scene collection."""
    if not scenes:
        raise ConfigError("no scenes to analyze")
    cc_means = []
    same_face_num = 0.0
    same_face_den = 0.0
    lags = []
    events = excluded = 0
    dispersions = []
    ctx_nss = []
    for scene in scenes:
        boxes = [f.boxes[0] for f in scene.faces]
        tracks = [
            [np.asarray(p).reshape(1, 2) for p in track]
            for track in subject_tracks(scene)
        ]
        stats = me.consistency_stats(tracks, boxes, scene.grid, seed=seed, trials=trials)
        cc_means.append(stats["cc_mean"])
        total = sum(pts.shape[0] for pts in scene.fixations)
        same_face_num += stats["same_face"] * total
        same_face_den += total
        try:
            tt = me.transition_time(
                scene.fixations, scene.speaker_ids(), boxes, scene.grid
            )
            if not np.isnan(tt["mean_frames"]):
                lags.extend([tt["mean_frames"]] * (tt["events"] - tt["excluded"]))
            events += tt["events"]
            excluded += tt["excluded"]
        except ContractError:
            pass
        for t, pts in enumerate(scene.fixations):
            inside = me.fixations_in_regions(pts, boxes, scene.grid)
            if inside.shape[0] >= 2:
                dispersions.append(me.dispersion(inside))
            speaker = scene.speaker_ids()[t]
            if speaker >= 0:
                x, y, w, h = scene.faces[speaker].boxes[t]
                center = np.array([[int(x + w // 2), int(y + h // 2)]])
                ctx_nss.append(me.contextual_nss(scene.density[t], center))
    return {
        "split_half_cc_mean": float(np.mean(cc_means)),
        "split_half_cc_std": float(np.std(cc_means)),
        "same_face_proportion": same_face_num / same_face_den,
        "transition_frames": float(np.mean(lags)) if lags else float("nan"),
        "transition_events": events,
        "transition_excluded": excluded,
        "dispersion_pixels": float(np.mean(dispersions)) if dispersions else float("nan"),
        "contextual_nss_speaker": float(np.mean(ctx_nss)) if ctx_nss else float("nan"),
        "scenes": len(scenes),
    }


def analysis_text(stats):
    lines = [
        f"{k}={me.fmt_float(v) if isinstance(v, float) else v}"
        for k, v in sorted(stats.items())
    ]
    return "\n".join(lines) + "\n"
