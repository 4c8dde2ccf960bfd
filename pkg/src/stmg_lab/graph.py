"""Spatio-temporal multi-modal graph over face, visual and audio nodes.

Per frame there is one node per tracked face, one visual node and one audio
node. Three edge families connect them:

* spatial — undirected, within one frame, complete over faces + visual;
* temporal — directed, same identity from frame t to t+1 (faces and visual);
* multimodal — directed, audio(t) to every face/visual node of frame t.

Attention neighborhoods are in-neighborhoods plus the node itself; a node
that does not participate in a family has an empty neighborhood there.
Graphs are immutable after construction; adding a face mid-sequence returns
a new graph.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import ConfigError, FrameRangeError, NodeLookupError

FACE = "face"
VISUAL = "visual"
AUDIO = "audio"

SPATIAL = "spatial"
TEMPORAL = "temporal"
MULTIMODAL = "multimodal"

EDGE_KINDS = (SPATIAL, TEMPORAL, MULTIMODAL)

_KIND_ORDER = {FACE: 0, VISUAL: 1, AUDIO: 2}


@dataclass(frozen=True)
class NodeId:
    """A node: its modality, frame index, and face index for face nodes."""

    kind: str
    frame: int
    face: int = -1

    def key(self):
        """(t, kind, n) lexicographic position — the canonical node order."""
        return (self.frame, _KIND_ORDER[self.kind], self.face)

    def __repr__(self):
        if self.kind == FACE:
            return f"Face({self.face}@{self.frame})"
        return f"{self.kind.capitalize()}({self.frame})"


def face_node(n, t):
    return NodeId(FACE, t, n)


def visual_node(t):
    return NodeId(VISUAL, t)


def audio_node(t):
    return NodeId(AUDIO, t)


class StmgGraph:
    """Typed node/edge structure with per-kind neighborhood indexes."""

    def __init__(self, frame_count, face_first_frame):
        if frame_count < 1:
            raise ConfigError(f"frame count must be >= 1, got {frame_count}")
        if not face_first_frame:
            raise ConfigError("graph needs at least one face")
        for n, t0 in face_first_frame.items():
            if not 0 <= t0 < frame_count:
                raise FrameRangeError(
                    f"face {n} first frame {t0} outside [0, {frame_count})"
                )
        self.frame_count = frame_count
        self.face_first_frame = dict(sorted(face_first_frame.items()))
        self._nodes = []
        for t in range(frame_count):
            for n in self.faces_at(t):
                self._nodes.append(face_node(n, t))
            self._nodes.append(visual_node(t))
            self._nodes.append(audio_node(t))
        self._node_set = frozenset(self._nodes)
        self._edges = {k: [] for k in EDGE_KINDS}
        self._hood = {k: {} for k in EDGE_KINDS}
        self._build_edges()

    # -- construction --------------------------------------------------------

    def faces_at(self, t):
        """Face ids alive at frame t, ascending. Faces persist once created."""
        return [n for n, t0 in self.face_first_frame.items() if t0 <= t]

    def spatial_nodes(self, t):
        """Ordered spatial-family nodes of frame t: faces then the visual node."""
        return [face_node(n, t) for n in self.faces_at(t)] + [visual_node(t)]

    def _build_edges(self):
        T = self.frame_count
        for t in range(T):
            spatial = self.spatial_nodes(t)
            for i, u in enumerate(spatial):
                for v in spatial[i + 1 :]:
                    self._edges[SPATIAL].append((u, v, False))
            for u in spatial:
                self._hood[SPATIAL][u] = (u,) + tuple(v for v in spatial if v != u)
            self._hood[SPATIAL][audio_node(t)] = ()

            a = audio_node(t)
            for v in spatial:
                self._edges[MULTIMODAL].append((a, v, True))
                self._hood[MULTIMODAL][v] = (v, a)
            self._hood[MULTIMODAL][a] = (a,)

        for t in range(T):
            for node in self.spatial_nodes(t):
                prev = NodeId(node.kind, t - 1, node.face)
                if t > 0 and prev in self._node_set:
                    self._edges[TEMPORAL].append((prev, node, True))
                    self._hood[TEMPORAL][node] = (node, prev)
                else:
                    self._hood[TEMPORAL][node] = (node,)
            self._hood[TEMPORAL][audio_node(t)] = ()

    # -- queries ---------------------------------------------------------------

    @property
    def nodes(self):
        """All nodes in (t, kind, n) lexicographic order."""
        return list(self._nodes)

    def edges(self, kind):
        """Edge list (u, v, directed) for one family, in construction order."""
        return list(self._edges[kind])

    def neighbors(self, node, kind):
        """In-neighborhood of ``node`` under ``kind``, self first.

        Empty when the node does not participate in that edge family.
        """
        if node not in self._node_set:
            raise NodeLookupError(f"{node} is not in this graph")
        return list(self._hood[kind][node])

    def face_count_at(self, t):
        return len(self.faces_at(t))


def build_stmg(face_count, frame_count):
    """Graph with ``face_count`` faces present from frame 0."""
    if face_count < 1:
        raise ConfigError(f"face count must be >= 1, got {face_count}")
    return StmgGraph(frame_count, {n: 0 for n in range(face_count)})


def neighbors(graph, node, kind):
    return graph.neighbors(node, kind)


def extend_with_face(graph, first_frame):
    """New graph with one more face whose nodes start at ``first_frame``.

    Existing nodes and edges are untouched; the new face gets spatial,
    temporal and multimodal wiring for frames >= ``first_frame`` only.
    """
    if not 0 <= first_frame < graph.frame_count:
        raise FrameRangeError(
            f"first frame {first_frame} outside [0, {graph.frame_count})"
        )
    faces = dict(graph.face_first_frame)
    new_id = max(faces) + 1
    faces[new_id] = first_frame
    return StmgGraph(graph.frame_count, faces)
