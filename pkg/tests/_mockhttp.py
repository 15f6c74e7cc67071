"""Tiny scripted JSON server on localhost for provider and LLM client tests."""
import json
import threading
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer


class MockServer:
    """``script(request_body, n)`` returns ``(status, body)`` or ``(status, body, delay_s)``.

    ``n`` is the 0-based request count; every parsed request body is kept
    in ``requests``.
    """

    def __init__(self, script):
        self.script = script
        self.requests = []
        self._lock = threading.Lock()
        outer = self

        class Handler(BaseHTTPRequestHandler):
            def do_POST(self):
                raw = self.rfile.read(int(self.headers.get("Content-Length", 0)))
                body = json.loads(raw or b"{}")
                with outer._lock:
                    n = len(outer.requests)
                    outer.requests.append({"path": self.path, "body": body, "headers": dict(self.headers)})
                status, reply, *delay = outer.script(body, n)
                if delay:
                    time.sleep(delay[0])
                data = reply.encode() if isinstance(reply, str) else json.dumps(reply).encode()
                try:
                    self.send_response(status)
                    self.send_header("Content-Type", "application/json")
                    self.send_header("Content-Length", str(len(data)))
                    self.end_headers()
                    self.wfile.write(data)
                except (BrokenPipeError, ConnectionResetError):
                    pass

            def log_message(self, *args):
                pass

        self.server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self.server.daemon_threads = True
        self.url = f"http://127.0.0.1:{self.server.server_address[1]}"
        self._thread = threading.Thread(target=self.server.serve_forever, daemon=True)

    def __enter__(self):
        self._thread.start()
        return self

    def __exit__(self, *exc):
        self.server.shutdown()
        self.server.server_close()
