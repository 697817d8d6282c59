"""Reference external scorer process for the binary wire protocol.

Speaks the handshake/request/response frames over stdio (default) or TCP.
Modes: `constant` replies a fixed value everywhere; `echo` replies the patch's
per-pixel channel mean / 255, scaled and offset (use a scale > 1 to exercise
client-side clamping). `--reorder k` buffers k requests and answers them in
reverse, which exercises request_id matching.

    python -m wsikit.scorer_stub --mode constant --value 0.7
    python -m wsikit.scorer_stub --mode echo --scale 1.5 --reorder 3
"""

from __future__ import annotations

import argparse
import socket
import struct
import sys

import numpy as np

MAGIC = b"PSCR"
VERSION = 1
HELLO = struct.Struct("<4sH")
HELLO_REPLY = struct.Struct("<4sHH")
FRAME = struct.Struct("<QII")


def _read_exactly(stream, n: int) -> bytes | None:
    data = b""
    while len(data) < n:
        chunk = stream.read(n - len(data))
        if not chunk:
            return None
        data += chunk
    return data


def _respond(args, rid: int, n: int, s: int, payload: bytes) -> bytes:
    if args.mode == "constant":
        probs = np.full((n, s, s), args.value, dtype=np.float32)
    else:
        pixels = np.frombuffer(payload, dtype=np.uint8).reshape(n, s, s, 3)
        probs = pixels.mean(axis=3, dtype=np.float32) / np.float32(255.0)
        probs = probs * np.float32(args.scale) + np.float32(args.offset)
    return FRAME.pack(rid, n, s) + probs.astype("<f4").tobytes()


def serve(args, reader, writer) -> None:
    hello = _read_exactly(reader, HELLO.size)
    if hello is None:
        return
    magic, version = HELLO.unpack(hello)
    if magic != MAGIC or version != VERSION:
        return  # drop the connection; client reports a handshake error
    writer.write(HELLO_REPLY.pack(MAGIC, VERSION, args.max_batch))
    writer.flush()

    buffered: list[bytes] = []
    while True:
        header = _read_exactly(reader, FRAME.size)
        if header is None:
            break
        rid, n, s = FRAME.unpack(header)
        payload = _read_exactly(reader, n * s * s * 3)
        if payload is None:
            break
        buffered.append(_respond(args, rid, n, s, payload))
        if len(buffered) >= max(args.reorder, 1):
            for frame in reversed(buffered):
                writer.write(frame)
            writer.flush()
            buffered.clear()


class _SockIO:
    def __init__(self, sock: socket.socket):
        self.sock = sock

    def read(self, n: int) -> bytes:
        return self.sock.recv(n)

    def write(self, data: bytes) -> None:
        self.sock.sendall(data)

    def flush(self) -> None:
        pass


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--mode", choices=["constant", "echo"], default="constant")
    parser.add_argument("--value", type=float, default=0.5)
    parser.add_argument("--scale", type=float, default=1.0)
    parser.add_argument("--offset", type=float, default=0.0)
    parser.add_argument("--max-batch", type=int, default=32)
    parser.add_argument("--reorder", type=int, default=1,
                        help="buffer this many requests, answer in reverse")
    parser.add_argument("--listen", type=int, default=None,
                        help="serve one TCP connection on this port instead of "
                             "stdio (0 picks a free port, printed on stdout)")
    args = parser.parse_args(argv)

    if args.listen is not None:
        server = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        server.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        server.bind(("127.0.0.1", args.listen))
        server.listen(1)
        sys.stdout.write(f"listening {server.getsockname()[1]}\n")
        sys.stdout.flush()
        conn, _ = server.accept()
        io = _SockIO(conn)
        serve(args, io, io)
        conn.close()
        server.close()
    else:
        serve(args, sys.stdin.buffer, sys.stdout.buffer)
    return 0


if __name__ == "__main__":
    sys.exit(main())
