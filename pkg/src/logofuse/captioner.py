"""Offline caption stage: stored captions, a deterministic mock, or an HTTP endpoint."""

from __future__ import annotations

import json
import os
import socket
import urllib.error
import urllib.request
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .data import PROMPT_TYPES, CaptionRecord, Captions, Manifest, load_captions, _captions_for, _OBJECTS
from .errors import CaptionError, ValidationError


class PromptType(str, Enum):
    OCR = "ocr"
    BRIEF = "brief"
    DETAIL = "detail"

    @property
    def prompt(self) -> str:
        return PROMPTS[self.value]


PROMPTS = {
    "ocr": "What are the words in the image?",
    "brief": "Describe the image concisely.",
    "detail": "Describe the following image in detail.",
}

SOURCE_KINDS = ("file", "mock", "http")


@dataclass
class CaptionSource:
    """One configured caption backend; only the fields of ``kind`` are used."""

    kind: str
    path: str | None = None
    seed: int = 0
    labels: dict[str, int] = field(default_factory=dict)
    endpoint: str | None = None
    token_env: str | None = None
    timeout: float = 30.0
    retries: int = 2
    max_concurrency: int = 4
    _store: Captions | None = field(default=None, repr=False, compare=False)

    def validate(self) -> None:
        if self.kind not in SOURCE_KINDS:
            raise ValidationError(f"caption source kind must be one of {SOURCE_KINDS}, got {self.kind!r}")
        given = {"file": self.path is not None, "http": self.endpoint is not None}
        for k, present in given.items():
            if present != (self.kind == k):
                raise ValidationError(f"caption source of kind {self.kind!r} must "
                                      f"{'set' if self.kind == k else 'not set'} the {k} parameter")
        if self.timeout <= 0 or self.retries < 0 or self.max_concurrency < 1:
            raise ValidationError("timeout must be > 0, retries >= 0, max_concurrency >= 1")

    @classmethod
    def file(cls, path) -> "CaptionSource":
        return cls("file", path=str(path))

    @classmethod
    def mock(cls, seed: int = 0, labels: dict[str, int] | None = None) -> "CaptionSource":
        return cls("mock", seed=seed, labels=dict(labels or {}))

    @classmethod
    def http(cls, endpoint: str, token_env: str | None = None, timeout: float = 30.0,
             retries: int = 2, max_concurrency: int = 4) -> "CaptionSource":
        return cls("http", endpoint=endpoint, token_env=token_env, timeout=timeout,
                   retries=retries, max_concurrency=max_concurrency)

    def store(self) -> Captions:
        if self._store is None:
            self._store = Captions(load_captions(self.path))
        return self._store


def _prompt_key(prompt_type) -> str:
    key = prompt_type.value if isinstance(prompt_type, PromptType) else prompt_type
    if key not in PROMPTS:
        raise ValidationError(f"prompt type must be one of {PROMPT_TYPES}, got {prompt_type!r}")
    return key


def mock_caption(image_id: str, prompt_type: str, seed: int, label: int | None = None) -> str:
    """Templated caption; names the class token when the label is known."""
    g = np.random.default_rng([seed, zlib.crc32(image_id.encode("utf-8")), PROMPT_TYPES.index(prompt_type)])
    obj_idx = int(g.integers(len(_OBJECTS)))
    if label is None:
        texts = _captions_for(g, 0, False, zlib.crc32(image_id.encode("utf-8")) % 1000, obj_idx)
        if prompt_type == "ocr":
            return texts["ocr"].split(" ", 1)[1]
        return texts[prompt_type]
    return _captions_for(g, label, True, None, obj_idx)[prompt_type]


def _http_caption(src: CaptionSource, image_id: str, prompt_type: str) -> str:
    body = json.dumps({"image_id": image_id, "image_b64": None, "prompt": PROMPTS[prompt_type]}).encode("utf-8")
    headers = {"Content-Type": "application/json"}
    if src.token_env:
        token = os.environ.get(src.token_env)
        if token is None:
            raise CaptionError(f"environment variable {src.token_env!r} holding the auth token is not set")
        headers["Authorization"] = f"Bearer {token}"
    last = None
    for _ in range(src.retries + 1):
        req = urllib.request.Request(src.endpoint, data=body, headers=headers, method="POST")
        try:
            with urllib.request.urlopen(req, timeout=src.timeout) as resp:
                raw = resp.read()
            break
        except (socket.timeout, TimeoutError) as exc:
            last = exc
        except urllib.error.URLError as exc:
            if isinstance(exc.reason, (socket.timeout, TimeoutError)):
                last = exc
                continue
            raise CaptionError(f"caption request for {image_id!r} failed: {exc}") from exc
    else:
        raise CaptionError(f"caption request for {image_id!r} timed out after {src.retries + 1} attempts") from last
    try:
        payload = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CaptionError(f"malformed caption response for {image_id!r}: not JSON") from exc
    if not isinstance(payload, dict) or not isinstance(payload.get("caption"), str):
        raise CaptionError(f"malformed caption response for {image_id!r}: expected {{\"caption\": str}}")
    return payload["caption"]


def get_caption(src: CaptionSource, image_id: str, prompt_type) -> str:
    src.validate()
    key = _prompt_key(prompt_type)
    if src.kind == "file":
        text = src.store().get(image_id, key)
        if text is None:
            raise CaptionError(f"no stored {key} caption for image {image_id!r} in {src.path}")
        return text
    if src.kind == "mock":
        return mock_caption(image_id, key, src.seed, src.labels.get(image_id))
    return _http_caption(src, image_id, key)


@dataclass
class PrecomputeResult:
    written: int
    skipped: int
    failures: list[tuple[str, str, str]]

    def summary(self) -> str:
        lines = [f"{self.written} written, {self.skipped} already present, {len(self.failures)} failed"]
        lines += [f"  {iid} [{p}]: {msg}" for iid, p, msg in self.failures[:20]]
        if len(self.failures) > 20:
            lines.append(f"  ... and {len(self.failures) - 20} more")
        return "\n".join(lines)


def precompute_captions(src: CaptionSource, manifest: Manifest, prompt_types, out_path) -> PrecomputeResult:
    """Append a caption record for every (image, prompt type) not yet in ``out_path``.

    Records already present are skipped, so an interrupted run resumes where
    it stopped. Failures are collected and summarized rather than aborting
    the remaining requests.
    """
    src.validate()
    keys = [_prompt_key(p) for p in prompt_types]
    if src.kind == "mock" and not src.labels:
        src = CaptionSource.mock(src.seed, {r.id: r.label for r in manifest.records})
    out_path = Path(out_path)
    done = set()
    if out_path.exists():
        done = {(c.image_id, c.prompt_type) for c in load_captions(out_path)}
    todo = [(r.id, k) for r in manifest.records for k in keys if (r.id, k) not in done]
    skipped = len(manifest.records) * len(keys) - len(todo)

    def one(job):
        iid, key = job
        try:
            return iid, key, get_caption(src, iid, key), None
        except (CaptionError, ValidationError) as exc:
            return iid, key, None, str(exc)

    workers = src.max_concurrency if src.kind == "http" else 1
    with ThreadPoolExecutor(max_workers=workers) as pool:
        results = list(pool.map(one, todo))
    written, failures = 0, []
    with out_path.open("a", encoding="utf-8") as fh:
        for iid, key, text, err in results:
            if err is not None:
                failures.append((iid, key, err))
                continue
            fh.write(json.dumps(CaptionRecord(iid, key, text).to_json(), ensure_ascii=False) + "\n")
            written += 1
    return PrecomputeResult(written, skipped, failures)
