import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np
import pytest

from logofuse.data import Captions, SyntheticSpec, generate_synthetic


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def toy_data():
    spec = SyntheticSpec(num_classes=4, samples_per_class=12, visual_dim=16, seed=3,
                         confusable_pairs=[(0, 1)], caption_informativeness=0.9)
    manifest, caps = generate_synthetic(spec)
    return spec, manifest, Captions(caps)


class StubCaptionServer:
    """Minimal endpoint speaking the caption JSON contract; records what it received."""

    def __init__(self):
        self.requests = []
        self.mode = "ok"  # ok | malformed | slow | error
        self.slow_seconds = 0.5
        self.fail_first = 0
        stub = self

        class Handler(BaseHTTPRequestHandler):
            def do_POST(self):
                body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
                stub.requests.append({"body": body, "auth": self.headers.get("Authorization")})
                if stub.fail_first > 0:
                    stub.fail_first -= 1
                    threading.Event().wait(stub.slow_seconds)
                if stub.mode == "slow":
                    threading.Event().wait(stub.slow_seconds)
                if stub.mode == "error":
                    self.send_response(500)
                    self.end_headers()
                    return
                if stub.mode == "malformed":
                    payload = b"not json"
                else:
                    payload = json.dumps({"caption": f"stub caption for {body['image_id']}: {body['prompt']}"}).encode()
                self.send_response(200)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(payload)))
                self.end_headers()
                try:
                    self.wfile.write(payload)
                except (BrokenPipeError, ConnectionResetError):
                    pass

            def log_message(self, *args):
                pass

        self.server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self.server.daemon_threads = True
        self.url = f"http://127.0.0.1:{self.server.server_address[1]}/caption"
        self.thread = threading.Thread(target=self.server.serve_forever, daemon=True)
        self.thread.start()

    def close(self):
        self.server.shutdown()
        self.server.server_close()


@pytest.fixture
def stub_server():
    s = StubCaptionServer()
    yield s
    s.close()
