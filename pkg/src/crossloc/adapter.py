"""Subprocess-backed neural localizer speaking line-delimited JSON.

The server reads one JSON request per line on stdin and writes one JSON
response per line on stdout. Requests:

    {"id": str, "method": "localize",
     "query_id": str,
     "intrinsics": {"fx", "fy", "cx", "cy", "width", "height"},
     "candidates": [{"frame_id", "pose": {"q": [w,x,y,z], "t": [x,y,z]},
                     "intrinsics": {...}, "depth_ref": str | null}],
     "query_depth_ref": str | null}

Responses carry the request id: either
    {"id": str, "quaternion": [w,x,y,z], "translation": [x,y,z],
     "confidence": float, "valid": bool}
or  {"id": str, "error": str}.

Depth maps are spooled to little-endian float32 files referenced by path;
a sidecar "depth_shape" [height, width] accompanies each reference.

The server is single-threaded and answers in request order; this client
serializes access with a lock so concurrent pipeline workers share one
channel safely.
"""

from __future__ import annotations

import json
import subprocess
import tempfile
import threading
import uuid
from pathlib import Path

import numpy as np

from crossloc.geometry import CameraIntrinsics, Pose, Rotation
from crossloc.neural import LocalizationContext, NeuralBranchError, NeuralPoseEstimate

PROTOCOL_VERSION = 1


class TransportError(NeuralBranchError):
    """The adapter subprocess is unavailable or the channel broke."""


def _intrinsics_json(k: CameraIntrinsics) -> dict:
    return {"fx": k.fx, "fy": k.fy, "cx": k.cx, "cy": k.cy,
            "width": k.width, "height": k.height}


class AdapterLocalizer:
    """Neural localizer that forwards requests to a child process.

    argv is the server command line, e.g. ["node", "dist/cli.js", "serve"].
    """

    def __init__(self, argv: list[str]):
        self._argv = list(argv)
        self._lock = threading.Lock()
        self._spool = Path(tempfile.mkdtemp(prefix="crossloc-adapter-"))
        try:
            self._proc = subprocess.Popen(
                self._argv,
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                text=True,
                bufsize=1,
            )
        except OSError as exc:
            raise TransportError(f"could not start adapter: {exc}") from exc

    def close(self) -> None:
        if self._proc.stdin and not self._proc.stdin.closed:
            self._proc.stdin.close()
        self._proc.wait(timeout=10)

    def __enter__(self) -> "AdapterLocalizer":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def _spool_depth(self, tag: str, depth) -> tuple[str | None, list[int] | None]:
        if depth is None:
            return None, None
        path = self._spool / f"{tag}.d32"
        np.ascontiguousarray(depth.values, dtype="<f4").tofile(path)
        return str(path), [int(s) for s in depth.values.shape]

    def _roundtrip(self, request: dict) -> dict:
        line = json.dumps(request, sort_keys=True)
        with self._lock:
            if self._proc.poll() is not None:
                raise TransportError("adapter process exited")
            try:
                self._proc.stdin.write(line + "\n")
                self._proc.stdin.flush()
                reply = self._proc.stdout.readline()
            except (BrokenPipeError, OSError) as exc:
                raise TransportError(f"adapter channel broke: {exc}") from exc
        if not reply:
            raise TransportError("adapter closed its output stream")
        try:
            response = json.loads(reply)
        except json.JSONDecodeError as exc:
            raise TransportError(f"unparseable adapter response: {reply!r}") from exc
        if response.get("id") != request["id"]:
            raise TransportError(
                f"response id {response.get('id')!r} does not match request"
            )
        return response

    def localize(self, ctx: LocalizationContext) -> NeuralPoseEstimate:
        candidates = []
        for cand in ctx.candidates:
            ref, shape = self._spool_depth(f"{ctx.query_id}.{cand.frame_id}", cand.depth)
            entry = {
                "frame_id": cand.frame_id,
                "pose": {
                    "q": [float(x) for x in cand.pose.rotation.q],
                    "t": [float(x) for x in cand.pose.translation],
                },
                "intrinsics": _intrinsics_json(cand.intrinsics),
                "depth_ref": ref,
            }
            if shape is not None:
                entry["depth_shape"] = shape
            candidates.append(entry)
        qref, qshape = self._spool_depth(f"{ctx.query_id}.query", ctx.query_depth)
        request = {
            "id": uuid.uuid4().hex,
            "method": "localize",
            "protocol_version": PROTOCOL_VERSION,
            "query_id": ctx.query_id,
            "intrinsics": _intrinsics_json(ctx.query_intrinsics),
            "candidates": candidates,
            "query_depth_ref": qref,
        }
        if qshape is not None:
            request["query_depth_shape"] = qshape
        response = self._roundtrip(request)
        if "error" in response:
            return NeuralPoseEstimate(Pose.identity(), 0.0, valid=False)
        try:
            q = np.asarray(response["quaternion"], dtype=np.float64)
            t = np.asarray(response["translation"], dtype=np.float64)
            pose = Pose(Rotation(q), t)
            conf = float(response["confidence"])
            valid = bool(response["valid"])
        except (KeyError, ValueError, TypeError) as exc:
            raise TransportError(f"malformed adapter response fields: {exc}") from exc
        return NeuralPoseEstimate(pose, conf, valid)
