"""Line-oriented client transport.

One request frame per line, one response line back.  Frames are canonical
JSON (sorted keys, no whitespace) with binary fields base64-encoded; see
the README for the field-by-field catalogue.  Works identically over TCP
and in-process, so tests exercise the exact bytes the socket carries.
"""

from __future__ import annotations

import json
import socket
import socketserver
import threading

from .node import Node


class NodeChannel:
    """Client-side handle: send one frame, get one decoded response."""

    def request(self, frame: dict) -> dict:
        raise NotImplementedError


class InProcessChannel(NodeChannel):
    def __init__(self, node: Node):
        self.node = node

    def request(self, frame: dict) -> dict:
        line = json.dumps(frame, sort_keys=True, separators=(",", ":"))
        return json.loads(self.node.handle_frame(line))


class TcpChannel(NodeChannel):
    def __init__(self, host: str, port: int, timeout: float = 15.0):
        self.host = host
        self.port = port
        self.timeout = timeout

    def request(self, frame: dict) -> dict:
        line = json.dumps(frame, sort_keys=True, separators=(",", ":")) + "\n"
        with socket.create_connection((self.host, self.port), timeout=self.timeout) as sock:
            sock.sendall(line.encode("utf-8"))
            buf = b""
            while not buf.endswith(b"\n"):
                chunk = sock.recv(65536)
                if not chunk:
                    break
                buf += chunk
        return json.loads(buf.decode("utf-8"))


def parse_address(text: str) -> tuple[str, int]:
    host, _, port = text.rpartition(":")
    return host or "127.0.0.1", int(port)


class NodeServer:
    """TCP front end for one node: newline-delimited request/response."""

    def __init__(self, node: Node, host: str = "127.0.0.1", port: int = 0):
        outer = self

        class Handler(socketserver.StreamRequestHandler):
            def handle(self):
                for raw in self.rfile:
                    line = raw.decode("utf-8").strip()
                    if not line:
                        continue
                    response = outer.node.handle_frame(line)
                    self.wfile.write(response.encode("utf-8") + b"\n")
                    self.wfile.flush()

        class Server(socketserver.ThreadingTCPServer):
            allow_reuse_address = True
            daemon_threads = True

        self.node = node
        self._server = Server((host, port), Handler)
        self.host, self.port = self._server.server_address
        self._thread: threading.Thread | None = None

    def start(self) -> None:
        self._thread = threading.Thread(
            target=self._server.serve_forever, name=f"server-{self.node.node_id}", daemon=True
        )
        self._thread.start()

    def stop(self) -> None:
        self._server.shutdown()
        self._server.server_close()
        if self._thread is not None:
            self._thread.join(timeout=2.0)
