"""Wire-level protocol tests: raw subprocess lines, no client library."""

import base64
import json
import shlex
import subprocess

import numpy as np
import pytest


class RawWorker:
    def __init__(self, cmd):
        self.proc = subprocess.Popen(
            shlex.split(cmd), stdin=subprocess.PIPE, stdout=subprocess.PIPE
        )

    def send(self, payload) -> dict:
        line = payload if isinstance(payload, bytes) else json.dumps(payload).encode()
        self.proc.stdin.write(line + b"\n")
        self.proc.stdin.flush()
        return json.loads(self.proc.stdout.readline())

    def close(self):
        if self.proc.poll() is None:
            self.proc.stdin.close()
            self.proc.wait(timeout=10)


@pytest.fixture()
def raw_worker(worker_env):
    w = RawWorker(worker_env.serve_cmd)
    yield w
    w.close()


def encode_image(image: np.ndarray) -> dict:
    data = np.ascontiguousarray(image, dtype=np.float32)
    return {
        "image": base64.b64encode(data.tobytes()).decode(),
        "h": image.shape[0],
        "w": image.shape[1],
    }


def handshake(w: RawWorker) -> dict:
    resp = w.send({"op": "handshake", "protocol": "1"})
    assert resp["ok"]
    return resp


class TestHandshake:
    def test_declares_version_model_and_loss_terms(self, raw_worker, worker_env):
        resp = handshake(raw_worker)
        assert resp["protocol"] == "1"
        assert resp["model"].startswith("fasterrcnn-tiny-")
        assert resp["loss_terms"] == [
            "loss_classifier",
            "loss_box_reg",
            "loss_objectness",
            "loss_rpn_box_reg",
        ]

    def test_version_mismatch_errors_and_exits_cleanly(self, worker_env):
        w = RawWorker(worker_env.serve_cmd)
        resp = w.send({"op": "handshake", "protocol": "2"})
        assert not resp["ok"]
        assert "protocol" in resp["error"]
        assert w.proc.wait(timeout=20) == 0


class TestRequests:
    def test_detect_on_all_zero_image(self, raw_worker):
        handshake(raw_worker)
        req = {"op": "detect", "confidence_threshold": 0.5}
        req.update(encode_image(np.zeros((64, 64, 3))))
        resp = raw_worker.send(req)
        assert resp["ok"]
        assert isinstance(resp["detections"], list)
        for d in resp["detections"]:
            assert set(d) == {"x_min", "y_min", "x_max", "y_max", "class_id", "confidence"}

    def test_gradient_payload_length(self, raw_worker):
        handshake(raw_worker)
        h, w = 48, 64
        req = {"op": "loss_gradient", "targets": [
            {"x_min": 10, "y_min": 10, "x_max": 30, "y_max": 30, "class_id": 0}
        ]}
        req.update(encode_image(np.full((h, w, 3), 120.0)))
        resp = raw_worker.send(req)
        assert resp["ok"]
        assert len(base64.b64decode(resp["gradient"])) == 4 * h * w * 3

    def test_malformed_json_gets_error_response_not_crash(self, raw_worker):
        handshake(raw_worker)
        resp = raw_worker.send(b"{this is not json")
        assert not resp["ok"] and "malformed" in resp["error"]
        # still serving
        req = {"op": "detect", "confidence_threshold": 0.9}
        req.update(encode_image(np.zeros((64, 64, 3))))
        assert raw_worker.send(req)["ok"]

    def test_unknown_op_rejected(self, raw_worker):
        handshake(raw_worker)
        resp = raw_worker.send({"op": "meditate"})
        assert not resp["ok"] and "unknown op" in resp["error"]

    def test_wrong_payload_size_rejected(self, raw_worker):
        handshake(raw_worker)
        req = {"op": "detect", "confidence_threshold": 0.5,
               "image": base64.b64encode(b"tiny").decode(), "h": 64, "w": 64}
        resp = raw_worker.send(req)
        assert not resp["ok"]
        # and the next request still answers
        ok = {"op": "detect", "confidence_threshold": 0.5}
        ok.update(encode_image(np.zeros((64, 64, 3))))
        assert raw_worker.send(ok)["ok"]

    def test_responses_in_request_order(self, raw_worker):
        handshake(raw_worker)
        thresholds = [0.9, 0.5, 0.1]
        for thr in thresholds:
            req = {"op": "detect", "confidence_threshold": thr}
            req.update(encode_image(np.zeros((32, 32, 3))))
            resp = raw_worker.send(req)
            assert resp["ok"]


class TestSelfTest:
    def test_self_test_passes_on_valid_install(self, worker_env):
        proc = subprocess.run(
            [
                "python3",
                "-m",
                "detector_worker",
                "self-test",
                "--checkpoint",
                str(worker_env.checkpoint),
                "--image",
                str(worker_env.sample_image),
            ],
            capture_output=True,
            text=True,
        )
        assert proc.returncode == 0, proc.stdout + proc.stderr
        assert "self-test passed" in proc.stdout

    def test_self_test_fails_on_missing_checkpoint(self, worker_env, tmp_path):
        proc = subprocess.run(
            [
                "python3",
                "-m",
                "detector_worker",
                "self-test",
                "--checkpoint",
                str(tmp_path / "missing.pt"),
                "--image",
                str(worker_env.sample_image),
            ],
            capture_output=True,
            text=True,
        )
        assert proc.returncode == 1
        assert "FAIL" in proc.stdout
