"""Self-describing on-disk container: text header plus raw float64 payload.

Layout, in order:

* line 1 — version string;
* line 2 — one-line JSON header (ints/strings only; canonical key order);
* line 3 — ``payload <nbytes>``;
* exactly ``nbytes`` of little-endian float64 data.

The header's ``arrays`` entry lists (name, shape) pairs in payload order, so
the payload is fully described and the write is byte-stable across runs.
"""

from __future__ import annotations

import json

import numpy as np

from .errors import SceneFormatError, UnsupportedVersionError


def pack_arrays(named_arrays):
    """Return (manifest, payload bytes) for an ordered list of (name, array)."""
    manifest = []
    chunks = []
    for name, arr in named_arrays:
        a = np.ascontiguousarray(arr, dtype="<f8")
        manifest.append([name, list(a.shape)])
        chunks.append(a.tobytes())
    return manifest, b"".join(chunks)


def write_container(path, version, header, named_arrays):
    manifest, payload = pack_arrays(named_arrays)
    doc = dict(header)
    doc["arrays"] = manifest
    header_line = json.dumps(doc, sort_keys=True, separators=(",", ":"))
    with open(path, "wb") as fh:
        fh.write(version.encode("ascii") + b"\n")
        fh.write(header_line.encode("utf-8") + b"\n")
        fh.write(f"payload {len(payload)}\n".encode("ascii"))
        fh.write(payload)


def read_container(path, version):
    """Parse a container, or raise with the line/offset of the first bad token.

    Returns (header dict, dict name -> float64 array). Never returns a
    partially parsed result.
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    first_nl = raw.find(b"\n")
    if first_nl < 0:
        raise SceneFormatError("missing version line", line=1, offset=0)
    found = raw[:first_nl].decode("ascii", errors="replace")
    if found != version:
        raise UnsupportedVersionError(
            f"unsupported container version {found!r}, expected {version!r}", line=1
        )
    second_nl = raw.find(b"\n", first_nl + 1)
    if second_nl < 0:
        raise SceneFormatError("missing header line", line=2, offset=first_nl + 1)
    try:
        header = json.loads(raw[first_nl + 1 : second_nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        offset = first_nl + 1 + getattr(exc, "pos", 0)
        raise SceneFormatError(f"bad header: {exc}", line=2, offset=offset) from exc
    third_nl = raw.find(b"\n", second_nl + 1)
    marker = raw[second_nl + 1 : third_nl].decode("ascii", errors="replace")
    if third_nl < 0 or not marker.startswith("payload "):
        raise SceneFormatError("missing payload marker", line=3, offset=second_nl + 1)
    try:
        nbytes = int(marker.split(" ", 1)[1])
    except ValueError as exc:
        raise SceneFormatError(
            f"bad payload size {marker!r}", line=3, offset=second_nl + 1
        ) from exc
    payload = raw[third_nl + 1 : third_nl + 1 + nbytes]
    if len(payload) != nbytes:
        raise SceneFormatError(
            f"payload truncated: expected {nbytes} bytes, found {len(payload)}",
            offset=third_nl + 1 + len(payload),
        )
    manifest = header.get("arrays")
    if not isinstance(manifest, list):
        raise SceneFormatError("header lacks an 'arrays' manifest", line=2)
    arrays = {}
    cursor = 0
    for entry in manifest:
        name, shape = entry
        count = int(np.prod(shape)) if shape else 1
        end = cursor + 8 * count
        if end > nbytes:
            raise SceneFormatError(
                f"array {name!r} overruns payload", offset=third_nl + 1 + cursor
            )
        arrays[name] = (
            np.frombuffer(payload[cursor:end], dtype="<f8").reshape(shape).copy()
        )
        cursor = end
    if cursor != nbytes:
        raise SceneFormatError(
            f"{nbytes - cursor} trailing payload bytes not described by the header",
            offset=third_nl + 1 + cursor,
        )
    return header, arrays
