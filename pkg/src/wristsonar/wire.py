"""Inference wire protocol: plug in an external model over a local socket.

Messages are length-prefixed binary, little-endian:

    message  = u32 length | payload
    request  = u8 head code | u32 W | u32 P | u32 C | float32 tensor (W*P*C)
    response = u8 head code | u32 dim | float32 vector (dim)

Head codes: 0 = pose60, 1 = wrist3, 2 = class12.  One request per
connection; each call is an independent request/response exchange with
its own timeout, so concurrent callers never share state.
"""

from __future__ import annotations

import socket
import socketserver
import struct
import threading

import numpy as np

from .model import (
    HEAD_CLASS,
    HEAD_DIMS,
    HEAD_POSE,
    HEAD_WRIST,
    BaselineModel,
    ClassPrediction,
    TaskHead,
    predict,
)

HEAD_CODES = {HEAD_POSE: 0, HEAD_WRIST: 1, HEAD_CLASS: 2}
_CODE_HEADS = {v: k for k, v in HEAD_CODES.items()}
_REQ_HEADER = struct.Struct("<BIII")
_RESP_HEADER = struct.Struct("<BI")


class ProtocolError(RuntimeError):
    pass


class EndpointError(ConnectionError):
    pass


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise ProtocolError("connection closed mid-message")
        buf += chunk
    return bytes(buf)


def _send_message(sock: socket.socket, payload: bytes) -> None:
    sock.sendall(struct.pack("<I", len(payload)) + payload)


def _recv_message(sock: socket.socket, limit: int = 1 << 28) -> bytes:
    (length,) = struct.unpack("<I", _recv_exact(sock, 4))
    if length > limit:
        raise ProtocolError(f"message of {length} bytes exceeds limit")
    return _recv_exact(sock, length)


def encode_request(head: TaskHead, window: np.ndarray) -> bytes:
    x = np.ascontiguousarray(window, dtype="<f4")
    if x.ndim != 3:
        raise ProtocolError(f"window must be 3-D, got shape {x.shape}")
    w, p, c = x.shape
    return _REQ_HEADER.pack(HEAD_CODES[head.kind], w, p, c) + x.tobytes()


def decode_request(payload: bytes) -> tuple[TaskHead, np.ndarray]:
    if len(payload) < _REQ_HEADER.size:
        raise ProtocolError("request too short")
    code, w, p, c = _REQ_HEADER.unpack_from(payload)
    if code not in _CODE_HEADS:
        raise ProtocolError(f"unknown head code {code}")
    data = np.frombuffer(payload, dtype="<f4", offset=_REQ_HEADER.size)
    if data.size != w * p * c:
        raise ProtocolError(f"request tensor has {data.size} values, header says {w * p * c}")
    return TaskHead(_CODE_HEADS[code]), data.reshape(w, p, c).astype(np.float32)


def encode_response(head: TaskHead, vector: np.ndarray) -> bytes:
    v = np.ascontiguousarray(vector, dtype="<f4").ravel()
    return _RESP_HEADER.pack(HEAD_CODES[head.kind], v.size) + v.tobytes()


def decode_response(payload: bytes) -> tuple[str, np.ndarray]:
    if len(payload) < _RESP_HEADER.size:
        raise ProtocolError("response too short")
    code, dim = _RESP_HEADER.unpack_from(payload)
    if code not in _CODE_HEADS:
        raise ProtocolError(f"unknown head code {code}")
    vec = np.frombuffer(payload, dtype="<f4", offset=_RESP_HEADER.size)
    if vec.size != dim:
        raise ProtocolError(f"response carries {vec.size} values, header says {dim}")
    return _CODE_HEADS[code], vec.copy()


def external_infer(endpoint: tuple[str, int], window: np.ndarray, head: TaskHead,
                   timeout: float = 5.0):
    """Run one window through a remote model; same output contract as predict.

    Raises :class:`EndpointError` when the endpoint is unreachable,
    :class:`ProtocolError` on malformed responses (including a wrong
    output dimension), and :class:`TimeoutError` on timeout.
    """
    try:
        sock = socket.create_connection(endpoint, timeout=timeout)
    except (ConnectionError, OSError) as e:
        if isinstance(e, socket.timeout):
            raise TimeoutError(f"connect to {endpoint} timed out") from e
        raise EndpointError(f"cannot reach {endpoint}: {e}") from e
    try:
        sock.settimeout(timeout)
        _send_message(sock, encode_request(head, window))
        try:
            kind, vec = decode_response(_recv_message(sock))
        except socket.timeout:
            raise TimeoutError(f"endpoint {endpoint} timed out") from None
    finally:
        sock.close()
    if kind != head.kind or vec.size != HEAD_DIMS[head.kind]:
        raise ProtocolError(
            f"expected {head.kind} ({HEAD_DIMS[head.kind]} values), got {kind} ({vec.size})"
        )
    if head.kind == HEAD_POSE:
        return vec.reshape(20, 3)
    if head.kind == HEAD_WRIST:
        return vec
    return ClassPrediction(class_id=int(np.argmax(vec)), scores=vec)


def model_response_vector(model: BaselineModel, window: np.ndarray) -> np.ndarray:
    out = predict(model, window)
    if isinstance(out, ClassPrediction):
        return out.scores
    return np.asarray(out).ravel()


class ModelServer:
    """Serve a fitted model on a local TCP socket (one request per connection).

    Use as a context manager or call :meth:`close`; ``address`` is the
    (host, port) clients pass to :func:`external_infer`.
    """

    def __init__(self, model: BaselineModel, host: str = "127.0.0.1", port: int = 0):
        expected = model.head

        class Handler(socketserver.BaseRequestHandler):
            def handle(self):
                try:
                    head, window = decode_request(_recv_message(self.request))
                    if head.kind != expected.kind:
                        return  # wrong head; drop the connection -> client protocol error
                    vec = model_response_vector(model, window)
                    _send_message(self.request, encode_response(head, vec))
                except (ProtocolError, OSError):
                    pass

        class Server(socketserver.ThreadingTCPServer):
            allow_reuse_address = True
            daemon_threads = True

        self._server = Server((host, port), Handler)
        self.address = self._server.server_address
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)
        self._thread.start()

    def close(self) -> None:
        self._server.shutdown()
        self._server.server_close()
        self._thread.join(timeout=5.0)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
