"""Patch scorers: the contract that stands in for the segmentation networks.

A scorer maps a batch of RGB patches to per-pixel tumour probabilities.
Built-in kinds (oracle / constant / blobby) are pure, seeded functions; the
`external` kind speaks a little-endian binary protocol to a foreign process
over stdio or TCP, so any ML runtime can plug in:

  handshake  client -> b"PSCR" + u16 version(=1)
             server -> b"PSCR" + u16 version + u16 max_batch
  request    u64 request_id, u32 n, u32 patch_size, n*s*s*3 bytes RGB
  response   u64 request_id, u32 n, u32 patch_size, n*s*s float32 in [0,1]

Responses may arrive out of order; request_id pairs them up. Version 2 is
reserved for multi-channel outputs. The wire carries no patch coordinates, so
the oracle scorer (which looks up an annotation window) is in-process only.
"""

from __future__ import annotations

import logging
import socket
import struct
import subprocess
import threading
import time
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

log = logging.getLogger(__name__)

MAGIC = b"PSCR"
PROTOCOL_VERSION = 1
_HELLO = struct.Struct("<4sH")
_HELLO_REPLY = struct.Struct("<4sHH")
_FRAME_HEADER = struct.Struct("<QII")


class ScorerError(RuntimeError):
    def __init__(self, message: str, member: int | None = None):
        super().__init__(message)
        self.member = member


class ProtocolError(ScorerError):
    pass


@dataclass(frozen=True)
class PatchBatch:
    n: int
    patch_size: int
    pixels: np.ndarray  # (n, s, s, 3) uint8

    def __post_init__(self) -> None:
        if self.n < 1:
            raise ValueError("batch must hold at least one patch")
        expect = (self.n, self.patch_size, self.patch_size, 3)
        if self.pixels.shape != expect or self.pixels.dtype != np.uint8:
            raise ValueError(f"pixels must be uint8 {expect}, got "
                             f"{self.pixels.dtype} {self.pixels.shape}")

    @classmethod
    def from_array(cls, pixels: np.ndarray) -> "PatchBatch":
        pixels = np.ascontiguousarray(pixels, dtype=np.uint8)
        return cls(pixels.shape[0], pixels.shape[1], pixels)


@dataclass(frozen=True)
class ProbPatchBatch:
    n: int
    patch_size: int
    probs: np.ndarray  # (n, s, s) float in [0, 1]

    def __post_init__(self) -> None:
        expect = (self.n, self.patch_size, self.patch_size)
        if self.probs.shape != expect:
            raise ValueError(f"probs must have shape {expect}")
        if not np.issubdtype(self.probs.dtype, np.floating):
            raise ValueError("probs must be floating point")


Coords = list[tuple[int, int]]  # per-patch level-0 (x0, y0) of the window top-left


class ConstantScorer:
    """Every pixel scores the same value; the simplest fixture."""

    def __init__(self, value: float):
        if not 0.0 <= value <= 1.0:
            raise ValueError("constant value must be in [0, 1]")
        self.value = float(value)

    def score(self, batch: PatchBatch, coords: Coords | None = None) -> ProbPatchBatch:
        probs = np.full((batch.n, batch.patch_size, batch.patch_size),
                        self.value, dtype=np.float64)
        return ProbPatchBatch(batch.n, batch.patch_size, probs)


class OracleScorer:
    """Returns the ground-truth annotation window, optionally corrupted with
    seeded Gaussian noise (clamped back to [0, 1]).

    Needs per-patch coordinates; pixels outside the annotation are 0.
    """

    def __init__(self, annotation: np.ndarray, sigma: float = 0.0, seed: int = 0):
        self.annotation = np.asarray(annotation, dtype=bool)
        if sigma < 0:
            raise ValueError("sigma must be >= 0")
        self.sigma = float(sigma)
        self.seed = int(seed)

    def _window(self, x0: int, y0: int, s: int) -> np.ndarray:
        out = np.zeros((s, s), dtype=np.float64)
        h, w = self.annotation.shape
        ax0, ay0 = max(x0, 0), max(y0, 0)
        ax1, ay1 = min(x0 + s, w), min(y0 + s, h)
        if ax0 < ax1 and ay0 < ay1:
            out[ay0 - y0:ay1 - y0, ax0 - x0:ax1 - x0] = \
                self.annotation[ay0:ay1, ax0:ax1]
        return out

    def score(self, batch: PatchBatch, coords: Coords | None = None) -> ProbPatchBatch:
        if coords is None or len(coords) != batch.n:
            raise ScorerError("oracle scorer requires per-patch coordinates")
        s = batch.patch_size
        probs = np.empty((batch.n, s, s), dtype=np.float64)
        for i, (x0, y0) in enumerate(coords):
            gt = self._window(x0, y0, s)
            if self.sigma > 0:
                rng = np.random.default_rng(
                    [self.seed, x0 + 2 ** 31, y0 + 2 ** 31])
                gt = np.clip(gt + rng.normal(0.0, self.sigma, size=gt.shape), 0.0, 1.0)
            probs[i] = gt
        return ProbPatchBatch(batch.n, s, probs)


class BlobbyScorer:
    """Annotation-free synthetic heatmaps: a seeded smooth random field,
    squashed into soft blobs. Coherent across patches when coordinates are
    supplied (lattice values are keyed by global position)."""

    CELL = 256  # level-0 pixels per lattice cell

    def __init__(self, seed: int = 0):
        self.seed = int(seed)

    def _lattice(self, i: int, j: int) -> float:
        rng = np.random.default_rng([self.seed, i + 2 ** 31, j + 2 ** 31])
        return float(rng.normal())

    def _field(self, x0: int, y0: int, s: int) -> np.ndarray:
        gx = np.arange(x0, x0 + s) / self.CELL
        gy = np.arange(y0, y0 + s) / self.CELL
        i0, j0 = int(np.floor(gy[0])), int(np.floor(gx[0]))
        i1, j1 = int(np.floor(gy[-1])) + 1, int(np.floor(gx[-1])) + 1
        lat = np.array([[self._lattice(i, j) for j in range(j0, j1 + 1)]
                        for i in range(i0, i1 + 1)])
        fy, fx = gy - i0, gx - j0
        iy, ix = fy.astype(int), fx.astype(int)
        ty, tx = (fy - iy)[:, None], (fx - ix)[None, :]
        a = lat[np.ix_(iy, ix)]
        b = lat[np.ix_(iy, ix + 1)]
        c = lat[np.ix_(iy + 1, ix)]
        d = lat[np.ix_(iy + 1, ix + 1)]
        return (a * (1 - ty) * (1 - tx) + b * (1 - ty) * tx
                + c * ty * (1 - tx) + d * ty * tx)

    def score(self, batch: PatchBatch, coords: Coords | None = None) -> ProbPatchBatch:
        s = batch.patch_size
        probs = np.empty((batch.n, s, s), dtype=np.float64)
        for i in range(batch.n):
            if coords is not None:
                x0, y0 = coords[i]
            else:
                # fall back to content-addressed randomness
                x0 = zlib.crc32(batch.pixels[i].tobytes()) % (1 << 20)
                y0 = zlib.crc32(batch.pixels[i].tobytes()[::-1]) % (1 << 20)
            field = self._field(int(x0), int(y0), s)
            probs[i] = 1.0 / (1.0 + np.exp(-4.0 * (field - 0.5)))
        return ProbPatchBatch(batch.n, s, probs)


class _PipeTransport:
    def __init__(self, command: list[str]):
        self.proc = subprocess.Popen(command, stdin=subprocess.PIPE,
                                     stdout=subprocess.PIPE)

    def write(self, data: bytes) -> None:
        self.proc.stdin.write(data)
        self.proc.stdin.flush()

    def read_exactly(self, n: int, deadline: float | None) -> bytes:
        # pipes block; trust the deadline enforced by the waiting side and
        # guard only against a dead process
        chunks = b""
        while len(chunks) < n:
            chunk = self.proc.stdout.read(n - len(chunks))
            if not chunk:
                raise ProtocolError("external scorer closed its pipe")
            chunks += chunk
        return chunks

    def close(self) -> None:
        # terminate before touching the streams: closing a buffered pipe
        # blocks while another thread sits in read(), and EOF unblocks it
        self.proc.terminate()
        try:
            self.proc.wait(timeout=5)
        except subprocess.TimeoutExpired:
            self.proc.kill()
            self.proc.wait(timeout=5)
        for stream in (self.proc.stdin, self.proc.stdout):
            try:
                stream.close()
            except OSError:
                pass


class _SocketTransport:
    def __init__(self, address: str, timeout: float):
        host, _, port = address.rpartition(":")
        self.sock = socket.create_connection((host or "127.0.0.1", int(port)),
                                             timeout=timeout)
        self.sock.settimeout(None)

    def write(self, data: bytes) -> None:
        self.sock.sendall(data)

    def read_exactly(self, n: int, deadline: float | None) -> bytes:
        chunks = b""
        while len(chunks) < n:
            chunk = self.sock.recv(n - len(chunks))
            if not chunk:
                raise ProtocolError("external scorer closed the connection")
            chunks += chunk
        return chunks

    def close(self) -> None:
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        try:
            self.sock.close()
        except OSError:
            pass


class ExternalScorer:
    """Client for the wire protocol; safe for concurrent `score` calls.

    A reader thread pairs responses to waiters via request_id, so a server may
    pipeline and reorder up to its advertised max_batch. Out-of-range floats
    are clamped to [0, 1] and counted in `clamp_count` with a logged warning.
    """

    def __init__(self, transport, timeout: float = 30.0):
        self._transport = transport
        self.timeout = timeout
        self._write_lock = threading.Lock()
        self._cond = threading.Condition()
        self._responses: dict[int, tuple[int, int, bytes]] = {}
        self._error: Exception | None = None
        self._next_id = 0
        self.clamp_count = 0
        self.max_batch = self._handshake()
        self._reader = threading.Thread(target=self._read_loop, daemon=True)
        self._reader.start()

    def _handshake(self) -> int:
        deadline = time.monotonic() + self.timeout
        self._transport.write(_HELLO.pack(MAGIC, PROTOCOL_VERSION))
        reply = self._transport.read_exactly(_HELLO_REPLY.size, deadline)
        magic, version, max_batch = _HELLO_REPLY.unpack(reply)
        if magic != MAGIC:
            raise ProtocolError(f"bad magic {magic!r}")
        if version != PROTOCOL_VERSION:
            raise ProtocolError(f"unsupported protocol version {version}")
        return max_batch if max_batch > 0 else 1

    def _read_loop(self) -> None:
        try:
            while True:
                header = self._transport.read_exactly(_FRAME_HEADER.size, None)
                rid, n, s = _FRAME_HEADER.unpack(header)
                payload = self._transport.read_exactly(n * s * s * 4, None)
                with self._cond:
                    self._responses[rid] = (n, s, payload)
                    self._cond.notify_all()
        except Exception as exc:  # noqa: BLE001 - forwarded to waiters
            with self._cond:
                self._error = exc
                self._cond.notify_all()

    def _submit(self, pixels: np.ndarray) -> int:
        n, s = pixels.shape[0], pixels.shape[1]
        with self._write_lock:
            rid = self._next_id
            self._next_id += 1
            self._transport.write(_FRAME_HEADER.pack(rid, n, s) + pixels.tobytes())
        return rid

    def _collect(self, rid: int, n: int, s: int) -> np.ndarray:
        deadline = time.monotonic() + self.timeout
        with self._cond:
            while rid not in self._responses:
                if self._error is not None:
                    raise ProtocolError(f"external scorer failed: {self._error}")
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    raise ScorerError(f"timed out waiting for request {rid}")
                self._cond.wait(remaining)
            rn, rs, payload = self._responses.pop(rid)
        if (rn, rs) != (n, s):
            raise ProtocolError(f"response dims {(rn, rs)} != request {(n, s)}")
        probs = np.frombuffer(payload, dtype="<f4").reshape(n, s, s).astype(np.float32)
        bad = int((probs < 0).sum() + (probs > 1).sum())
        if bad:
            self.clamp_count += bad
            log.warning("clamped %d out-of-range values from external scorer "
                        "(total %d)", bad, self.clamp_count)
            probs = np.clip(probs, 0.0, 1.0)
        return probs

    def score(self, batch: PatchBatch, coords: Coords | None = None) -> ProbPatchBatch:
        pending: list[tuple[int, int]] = []
        for start in range(0, batch.n, self.max_batch):
            chunk = batch.pixels[start:start + self.max_batch]
            pending.append((self._submit(np.ascontiguousarray(chunk)), len(chunk)))
        outs = [self._collect(rid, n, batch.patch_size) for rid, n in pending]
        return ProbPatchBatch(batch.n, batch.patch_size, np.concatenate(outs))

    def close(self) -> None:
        self._transport.close()

    def __enter__(self) -> "ExternalScorer":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def open_external(command_or_address: list[str] | str,
                  timeout: float = 30.0) -> ExternalScorer:
    """Launch a command (stdio transport) or connect to host:port (TCP)."""
    if isinstance(command_or_address, str):
        transport = _SocketTransport(command_or_address, timeout)
    else:
        transport = _PipeTransport(list(command_or_address))
    try:
        return ExternalScorer(transport, timeout)
    except Exception:
        transport.close()
        raise


def load_annotation(path: str | Path) -> np.ndarray:
    """Binary annotation plane from .npy or any PIL-readable image."""
    path = Path(path)
    if path.suffix == ".npy":
        return np.load(path).astype(bool)
    with Image.open(path) as im:
        return np.asarray(im.convert("L")) > 127


def build_scorer(spec: dict):
    """Instantiate one scorer from its JSON spec."""
    kind = spec.get("kind")
    if kind == "constant":
        return ConstantScorer(float(spec["value"]))
    if kind == "oracle":
        annotation = spec.get("annotation")
        if isinstance(annotation, (str, Path)):
            annotation = load_annotation(annotation)
        return OracleScorer(np.asarray(annotation, dtype=bool),
                            sigma=float(spec.get("sigma", 0.0)),
                            seed=int(spec.get("seed", 0)))
    if kind == "blobby":
        return BlobbyScorer(seed=int(spec.get("seed", 0)))
    if kind == "external":
        target = spec.get("command") or spec.get("address")
        if target is None:
            raise ValueError("external scorer needs 'command' or 'address'")
        return open_external(target, timeout=float(spec.get("timeout", 30.0)))
    raise ValueError(f"unknown scorer kind {kind!r}")


class EnsembleHandle:
    """Fixed-order fan-out over member scorers."""

    def __init__(self, members: list):
        if not members:
            raise ValueError("ensemble needs at least one member")
        self.members = list(members)

    @classmethod
    def from_specs(cls, specs: list[dict]) -> "EnsembleHandle":
        members = []
        for idx, spec in enumerate(specs):
            try:
                members.append(build_scorer(spec))
            except Exception as exc:
                for m in members:
                    close = getattr(m, "close", None)
                    if close:
                        close()
                raise ScorerError(f"ensemble member {idx} failed to open: {exc}",
                                  member=idx) from exc
        return cls(members)

    def score_all(self, batch: PatchBatch,
                  coords: Coords | None = None) -> list[ProbPatchBatch]:
        outs = []
        for idx, member in enumerate(self.members):
            try:
                outs.append(member.score(batch, coords))
            except Exception as exc:
                raise ScorerError(f"ensemble member {idx} failed: {exc}",
                                  member=idx) from exc
        return outs

    def close(self) -> None:
        for member in self.members:
            close = getattr(member, "close", None)
            if close:
                close()
