"""Multi-head graph attention layers and the full network forward pass.

One network layer runs three attention blocks in series — spatial per frame,
then temporal, then multi-modal — each with per-modality transforms, shared
per-head attention vectors, a LeakyReLU-scored softmax over the in-neighbor
set (self included), and a residual connection. Inner layers concatenate
head results; the final layer averages them. A linear head maps every face
node and the visual node to two speaking-class logits.

Self-attention coefficients from the final layer's spatial pass are returned
as an :class:`AttentionRecord`; they drive both the attention loss and the
saliency re-weighting.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .container import read_container, write_container
from .errors import ConfigError, ContractError, DimensionError
from .graph import AUDIO, FACE, MULTIMODAL, SPATIAL, TEMPORAL, VISUAL, NodeId
from .numerics import Tensor

CONCAT = "concat"
AVERAGE = "average"

CHECKPOINT_VERSION = "stmg-ckpt-1"


@dataclass
class GatLayerParams:
    """Parameters of one attention block over one edge family.

    ``w[modality][d]`` is the d-th head's transform for that modality;
    ``a[d]`` the d-th head's attention vector of length 2 x head width.
    ``res[modality]`` is a learned residual projection, or None for an
    identity residual (requires matching in/out widths).
    """

    w: dict
    a: list
    res: dict
    heads: int
    merge: str = CONCAT
    slope: float = 0.2
    use_residual: bool = True

    def __post_init__(self):
        if self.heads < 1:
            raise ConfigError(f"head count must be >= 1, got {self.heads}")
        if self.merge not in (CONCAT, AVERAGE):
            raise ConfigError(f"unknown head merge {self.merge!r}")
        h = self.head_width
        for d, vec in enumerate(self.a):
            if vec.shape != (2 * h,):
                raise DimensionError(
                    f"attention vector {d} has shape {vec.shape}, expected ({2 * h},)"
                )

    @property
    def head_width(self):
        first = next(iter(self.w.values()))
        return first[0].shape[1]

    @property
    def out_width(self):
        return self.head_width * (self.heads if self.merge == CONCAT else 1)

    def in_width(self, modality):
        return self.w[modality][0].shape[0]


@dataclass
class StmgLayerParams:
    spatial: GatLayerParams
    temporal: GatLayerParams
    multimodal: GatLayerParams


@dataclass
class StmgNetworkParams:
    """The L-layer network: attention blocks, classifier head, blend weight."""

    layers: list
    classifier_w: Tensor
    classifier_b: Tensor
    reweight: float
    dims: dict
    embed_dim: int
    heads: int = 2

    def __post_init__(self):
        if not 0.0 <= self.reweight <= 1.0:
            raise ConfigError(f"reweight blend must lie in [0,1], got {self.reweight}")
        if self.layers:
            width = self.layers[-1].multimodal.out_width
        else:
            width = self.dims[FACE]
        if self.classifier_w.shape != (width, 2):
            raise DimensionError(
                f"classifier expects ({width},2), got {self.classifier_w.shape}"
            )

    def parameters(self):
        """Stable name -> tensor map covering every trainable array."""
        out = {}
        for li, layer in enumerate(self.layers):
            for fam, block in (
                (SPATIAL, layer.spatial),
                (TEMPORAL, layer.temporal),
                (MULTIMODAL, layer.multimodal),
            ):
                for mod in sorted(block.w):
                    for d, t in enumerate(block.w[mod]):
                        out[f"layer{li}.{fam}.w.{mod}.h{d}"] = t
                for d, t in enumerate(block.a):
                    out[f"layer{li}.{fam}.a.h{d}"] = t
                for mod in sorted(block.res):
                    t = block.res[mod]
                    if t is not None:
                        out[f"layer{li}.{fam}.res.{mod}"] = t
        out["classifier.w"] = self.classifier_w
        out["classifier.b"] = self.classifier_b
        return out


@dataclass
class AttentionRecord:
    """Self-attention readout: one coefficient per face/visual node per frame.

    ``per_head[t][d]`` is a length-k tensor over the frame's spatial nodes in
    ``node_order[t]`` order (faces ascending, visual last). Values live in
    [0,1] because each is a softmax entry.
    """

    node_order: list
    per_head: list

    @property
    def frames(self):
        return len(self.node_order)

    @property
    def heads(self):
        return len(self.per_head[0])

    def head_one(self, t):
        return self.per_head[t][0]

    def head_mean(self, t):
        acc = self.per_head[t][0]
        for d in range(1, self.heads):
            acc = acc + self.per_head[t][d]
        return acc * (1.0 / self.heads)

    def stacked(self, mode="mean"):
        """(T, k) tensor of per-frame weights; frames must share a node count."""
        k = len(self.node_order[0])
        if any(len(order) != k for order in self.node_order):
            raise ContractError("frames have differing node counts; cannot stack")
        pick = self.head_mean if mode == "mean" else self.head_one
        return nm.stack([pick(t) for t in range(self.frames)])


@dataclass
class StmgOutput:
    node_order: list  # per frame: face nodes ascending, then visual
    logits: list  # per frame: (k, 2) tensor aligned with node_order
    attention: AttentionRecord
    attention_audit: list = field(default_factory=list)


# -- initialization -----------------------------------------------------------


def _glorot(rng, shape):
    scale = np.sqrt(2.0 / sum(shape)) if len(shape) > 1 else np.sqrt(1.0 / shape[0])
    return Tensor.param(rng.normal(0.0, scale, size=shape))


def _init_block(rng, in_dims, head_width, heads, merge, slope):
    w = {mod: [_glorot(rng, (din, head_width)) for _ in range(heads)] for mod, din in in_dims.items()}
    a = [_glorot(rng, (2 * head_width,)) for _ in range(heads)]
    out_width = head_width * (heads if merge == CONCAT else 1)
    res = {}
    for mod, din in in_dims.items():
        if mod == AUDIO:
            continue  # audio is a source only; it is never updated
        res[mod] = None if din == out_width else _glorot(rng, (din, out_width))
    return GatLayerParams(w=w, a=a, res=res, heads=heads, merge=merge, slope=slope)


def init_stmg_params(
    face_dim,
    visual_dim,
    audio_dim,
    embed_dim=32,
    heads=2,
    layers=2,
    reweight=0.2,
    slope=0.2,
    rng=None,
):
    """Build a freshly initialized network with the standard width chain.

    Inner layers concatenate ``heads`` results of width ``embed_dim/heads``;
    the final layer averages heads of width ``embed_dim``. The audio feature
    is consumed at its native width by every multi-modal block. A zero-layer
    network is the bare classifier and needs matching face/visual widths.
    """
    if layers < 0:
        raise ConfigError(f"layer count must be >= 0, got {layers}")
    if heads < 1:
        raise ConfigError(f"head count must be >= 1, got {heads}")
    if embed_dim % heads != 0:
        raise ConfigError(f"embed dim {embed_dim} not divisible by {heads} heads")
    if layers == 0 and face_dim != visual_dim:
        raise ConfigError(
            "a classifier-only network needs equal face and visual widths, "
            f"got {face_dim} vs {visual_dim}"
        )
    rng = rng or np.random.default_rng(0)
    dims = {FACE: face_dim, VISUAL: visual_dim, AUDIO: audio_dim}
    chain = []
    cur = {FACE: face_dim, VISUAL: visual_dim}
    for li in range(layers):
        final = li == layers - 1
        merge = AVERAGE if final else CONCAT
        head_width = embed_dim if final else embed_dim // heads
        spatial = _init_block(rng, dict(cur), head_width, heads, merge, slope)
        width = spatial.out_width
        uniform = {FACE: width, VISUAL: width}
        temporal = _init_block(rng, dict(uniform), head_width, heads, merge, slope)
        mm_dims = dict(uniform)
        mm_dims[AUDIO] = audio_dim
        multimodal = _init_block(rng, mm_dims, head_width, heads, merge, slope)
        chain.append(StmgLayerParams(spatial, temporal, multimodal))
        cur = {FACE: width, VISUAL: width}
    out_width = chain[-1].multimodal.out_width if chain else face_dim
    classifier_w = _glorot(rng, (out_width, 2))
    classifier_b = Tensor.param(np.zeros(2))
    return StmgNetworkParams(
        layers=chain,
        classifier_w=classifier_w,
        classifier_b=classifier_b,
        reweight=reweight,
        dims=dims,
        embed_dim=embed_dim,
        heads=heads,
    )


# -- attention blocks -----------------------------------------------------------


def _attention_pair_columns(block, d, u_center, u_neighbor):
    """Two-column logits: each center against itself and one in-neighbor."""
    h = block.head_width
    a_src = nm.reshape(nm.getitem(block.a[d], slice(0, h)), (h, 1))
    a_dst = nm.reshape(nm.getitem(block.a[d], slice(h, 2 * h)), (h, 1))
    s = nm.matmul(u_center, a_src)
    d_self = nm.matmul(u_center, a_dst)
    d_nb = nm.matmul(u_neighbor, a_dst)
    col_self = nm.leaky_relu(s + d_self, block.slope)
    col_nb = nm.leaky_relu(s + d_nb, block.slope)
    return nm.concat([col_self, col_nb], axis=1)


def _merge_heads(head_outputs, merge):
    if merge == CONCAT:
        return nm.concat(head_outputs, axis=1)
    acc = head_outputs[0]
    for z in head_outputs[1:]:
        acc = acc + z
    return acc * (1.0 / len(head_outputs))


def _apply_residual(block, modality, z, x):
    if not block.use_residual:
        return z
    proj = block.res.get(modality)
    if proj is None:
        if x.shape != z.shape:
            raise DimensionError(
                f"identity residual needs matching widths, got {x.shape} vs {z.shape}"
            )
        return z + x
    return z + nm.matmul(x, proj)


def _audit_row_sums(audit, alpha):
    if audit is not None:
        audit.append(alpha.data.sum(axis=-1).reshape(-1).copy())


def _spatial_pass(graph, feats, block, p, collect_alpha, audit):
    out = dict(feats)
    alpha_diags = [] if collect_alpha else None
    node_orders = []
    for t in range(graph.frame_count):
        nodes = graph.spatial_nodes(t)
        node_orders.append(nodes)
        k = len(nodes)
        x_face = nm.stack([feats[n] for n in nodes[:-1]])
        x_vis = nm.reshape(feats[nodes[-1]], (1, -1))
        eye = np.eye(k)
        head_outputs = []
        frame_diags = []
        for d in range(block.heads):
            u = nm.concat(
                [nm.matmul(x_face, block.w[FACE][d]), nm.matmul(x_vis, block.w[VISUAL][d])],
                axis=0,
            )
            h = block.head_width
            a_src = nm.reshape(nm.getitem(block.a[d], slice(0, h)), (h, 1))
            a_dst = nm.reshape(nm.getitem(block.a[d], slice(h, 2 * h)), (h, 1))
            s = nm.matmul(u, a_src)
            dd = nm.matmul(u, a_dst)
            logits = nm.leaky_relu(s + nm.transpose(dd), block.slope)
            alpha = nm.softmax(logits)
            _audit_row_sums(audit, alpha)
            diag = nm.sum_(alpha * eye, axis=1)
            agg = nm.attn_matmul(alpha, u)
            self_term = nm.reshape(diag, (k, 1)) * u
            if k > 1:
                pre = self_term * p + (agg - self_term) * (1.0 - p)
            else:
                pre = self_term
            head_outputs.append(nm.leaky_relu(pre, block.slope))
            frame_diags.append(diag)
        z = _merge_heads(head_outputs, block.merge)
        z_face = nm.getitem(z, slice(0, k - 1))
        z_vis = nm.getitem(z, slice(k - 1, k))
        z_face = _apply_residual(block, FACE, z_face, x_face)
        z_vis = _apply_residual(block, VISUAL, z_vis, x_vis)
        for i, n in enumerate(nodes[:-1]):
            out[n] = nm.getitem(z_face, i)
        out[nodes[-1]] = nm.getitem(z_vis, 0)
        if collect_alpha:
            alpha_diags.append(frame_diags)
    return out, (node_orders, alpha_diags)


def _temporal_pass(graph, feats, block, p, audit):
    out = dict(feats)
    identities = [(FACE, n) for n in sorted(graph.face_first_frame)] + [(VISUAL, -1)]
    for kind, n in identities:
        t0 = graph.face_first_frame[n] if kind == FACE else 0
        frames = list(range(t0, graph.frame_count))
        nodes = [NodeId(kind, t, n if kind == FACE else -1) for t in frames]
        x = nm.stack([feats[node] for node in nodes])
        ti = len(frames)
        head_outputs = []
        for d in range(block.heads):
            u = nm.matmul(x, block.w[kind][d])
            h = block.head_width
            if ti == 1:
                # no predecessor frame anywhere: neighborhood is {self}
                head_outputs.append(nm.leaky_relu(u, block.slope))
                _audit_row_sums(audit, Tensor(np.ones((1, 1))))
                continue
            zero_row = Tensor(np.zeros((1, h)))
            u_prev = nm.concat([zero_row, nm.getitem(u, slice(0, ti - 1))], axis=0)
            logits = _attention_pair_columns(block, d, u, u_prev)
            mask = np.ones((ti, 2), dtype=bool)
            mask[0, 1] = False
            alpha = nm.masked_softmax(logits, mask)
            _audit_row_sums(audit, alpha)
            a0 = nm.getitem(alpha, (slice(None), slice(0, 1)))
            a1 = nm.getitem(alpha, (slice(None), slice(1, 2)))
            self_term = a0 * u
            neigh = a1 * u_prev
            w_self = np.full((ti, 1), p)
            w_neigh = np.full((ti, 1), 1.0 - p)
            w_self[0, 0] = 1.0  # first frame: singleton neighborhood, no blend
            w_neigh[0, 0] = 0.0
            pre = self_term * w_self + neigh * w_neigh
            head_outputs.append(nm.leaky_relu(pre, block.slope))
        z = _merge_heads(head_outputs, block.merge)
        z = _apply_residual(block, kind, z, x)
        for i, node in enumerate(nodes):
            out[node] = nm.getitem(z, i)
    return out, None


def _multimodal_pass(graph, feats, block, p, audit):
    out = dict(feats)
    for t in range(graph.frame_count):
        nodes = graph.spatial_nodes(t)
        k = len(nodes)
        x_face = nm.stack([feats[n] for n in nodes[:-1]])
        x_vis = nm.reshape(feats[nodes[-1]], (1, -1))
        x_audio = nm.reshape(feats[NodeId(AUDIO, t)], (1, -1))
        head_outputs = []
        for d in range(block.heads):
            u = nm.concat(
                [nm.matmul(x_face, block.w[FACE][d]), nm.matmul(x_vis, block.w[VISUAL][d])],
                axis=0,
            )
            u_audio = nm.matmul(x_audio, block.w[AUDIO][d])
            logits = _attention_pair_columns(block, d, u, u_audio)
            alpha = nm.softmax(logits)
            _audit_row_sums(audit, alpha)
            a0 = nm.getitem(alpha, (slice(None), slice(0, 1)))
            a1 = nm.getitem(alpha, (slice(None), slice(1, 2)))
            pre = (a0 * u) * p + (a1 * u_audio) * (1.0 - p)
            head_outputs.append(nm.leaky_relu(pre, block.slope))
        z = _merge_heads(head_outputs, block.merge)
        z_face = nm.getitem(z, slice(0, k - 1))
        z_vis = nm.getitem(z, slice(k - 1, k))
        z_face = _apply_residual(block, FACE, z_face, x_face)
        z_vis = _apply_residual(block, VISUAL, z_vis, x_vis)
        for i, n in enumerate(nodes[:-1]):
            out[n] = nm.getitem(z_face, i)
        out[nodes[-1]] = nm.getitem(z_vis, 0)
    return out, None


_PASSES = {SPATIAL: _spatial_pass, TEMPORAL: _temporal_pass, MULTIMODAL: _multimodal_pass}


def gat_layer_forward(graph, kind, feats, block, reweight, collect_alpha=False, audit=None):
    """Run one attention block over one edge family.

    ``feats`` maps NodeId -> feature tensor; a new map is returned with the
    participating nodes updated (audio nodes are read, never written). For
    the spatial family with ``collect_alpha`` the per-frame, per-head
    self-attention coefficients are returned alongside.
    """
    if kind == SPATIAL:
        return _spatial_pass(graph, feats, block, reweight, collect_alpha, audit)
    return _PASSES[kind](graph, feats, block, reweight, audit)


def _validate_features(graph, feats, params):
    for node in graph.nodes:
        t = feats.get(node)
        if t is None:
            raise ContractError(f"missing feature for {node}")
        want = params.dims[node.kind]
        if t.shape != (want,):
            raise DimensionError(
                f"feature for {node} has shape {t.shape}, expected ({want},)"
            )


def stmg_forward(graph, feats, params, collect_audit=False):
    """Full inference pass: L layers of (spatial, temporal, multi-modal).

    Returns per-frame two-class logits for every face node and the visual
    node, plus the final layer's spatial self-attention record. With
    ``collect_audit`` every pass appends its softmax row sums for
    normalization checks.
    """
    _validate_features(graph, feats, params)
    audit = [] if collect_audit else None
    state = dict(feats)
    record = None
    for li, layer in enumerate(params.layers):
        final = li == len(params.layers) - 1
        state, info = _spatial_pass(graph, state, layer.spatial, params.reweight, final, audit)
        if final:
            record = AttentionRecord(node_order=info[0], per_head=info[1])
        state, _ = _temporal_pass(graph, state, layer.temporal, params.reweight, audit)
        state, _ = _multimodal_pass(graph, state, layer.multimodal, params.reweight, audit)
    if record is None:  # zero-layer network: classifier only, uniform attention
        orders = [graph.spatial_nodes(t) for t in range(graph.frame_count)]
        record = AttentionRecord(
            node_order=orders,
            per_head=[[Tensor(np.full(len(o), 1.0 / len(o)))] for o in orders],
        )
    logits = []
    node_order = []
    for t in range(graph.frame_count):
        nodes = graph.spatial_nodes(t)
        node_order.append(nodes)
        z = nm.stack([state[n] for n in nodes])
        logits.append(nm.matmul(z, params.classifier_w) + params.classifier_b)
    return StmgOutput(
        node_order=node_order,
        logits=logits,
        attention=record,
        attention_audit=audit or [],
    )


def classify_nodes(logits):
    """argmax speaking class with confidence = probability of class 1.

    An exact tie classifies as 0 (non-speaking). Accepts a (..., 2) array or
    tensor; returns (labels, confidence) numpy arrays.
    """
    arr = logits.data if isinstance(logits, Tensor) else np.asarray(logits, dtype=np.float64)
    if arr.shape[-1] != 2:
        raise DimensionError(f"need 2-class logits, got shape {arr.shape}")
    d = arr[..., 1] - arr[..., 0]
    labels = (d > 0).astype(np.int64)
    conf = np.empty_like(d)
    pos = d >= 0
    conf[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    ed = np.exp(d[~pos])
    conf[~pos] = ed / (1.0 + ed)
    return labels, conf


def attention_weights_for_saliency(record, mode="mean"):
    """Per-frame self-attention weights, one per face plus the visual node.

    ``mode`` picks the head readout: "mean" (default) averages heads,
    "head1" returns the first head alone. Each weight lies in [0,1].
    """
    if mode not in ("mean", "head1"):
        raise ConfigError(f"unknown attention readout {mode!r}")
    out = []
    for t in range(record.frames):
        w = record.head_mean(t) if mode == "mean" else record.head_one(t)
        out.append((record.node_order[t], w))
    return out


# -- checkpoints ----------------------------------------------------------------


def save_checkpoint(path, params, extra=None, extra_tensors=None):
    """Write every named tensor plus the structural metadata needed to rebuild.

    ``extra_tensors`` lets a caller store companion arrays (e.g. a refiner)
    in the same container; their names must not collide with the network's.
    """
    named = dict(params.parameters())
    if extra_tensors:
        for name, t in extra_tensors.items():
            if name in named:
                raise ContractError(f"extra tensor name collides: {name}")
            named[name] = t
    meta = {
        "layers": len(params.layers),
        "heads": params.heads,
        "embed_dim": params.embed_dim,
        "reweight": _float_repr(params.reweight),
        "slope": _float_repr(params.layers[0].spatial.slope if params.layers else 0.2),
        "dims": {k: int(v) for k, v in sorted(params.dims.items())},
        "extra": extra or {},
    }
    write_container(
        path, CHECKPOINT_VERSION, meta, [(k, named[k].data) for k in sorted(named)]
    )


def _float_repr(x):
    return repr(float(x))


def load_checkpoint(path):
    """Rebuild the network from a checkpoint container.

    Returns (params, header, leftover arrays) — the leftovers are any
    companion tensors a caller stored alongside the network.
    """
    header, arrays = read_container(path, CHECKPOINT_VERSION)
    dims = {k: int(v) for k, v in header["dims"].items()}
    params = init_stmg_params(
        face_dim=dims[FACE],
        visual_dim=dims[VISUAL],
        audio_dim=dims[AUDIO],
        embed_dim=int(header["embed_dim"]),
        heads=int(header["heads"]),
        layers=int(header["layers"]),
        reweight=float(header["reweight"]),
        slope=float(header["slope"]),
        rng=np.random.default_rng(0),
    )
    named = params.parameters()
    missing = set(named) - set(arrays)
    if missing:
        raise ContractError(f"checkpoint lacks network tensors: {sorted(missing)}")
    for name, tensor in named.items():
        stored = arrays[name]
        if stored.shape != tensor.data.shape:
            raise DimensionError(
                f"checkpoint tensor {name} has shape {stored.shape}, expected {tensor.data.shape}"
            )
        tensor.data = stored
    leftovers = {k: v for k, v in arrays.items() if k not in named}
    return params, header, leftovers
