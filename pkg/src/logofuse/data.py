"""Manifests, caption files, embedding files and the synthetic dataset generator."""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, ValidationError

SPLITS = ("train", "gallery", "query")
PROMPT_TYPES = ("ocr", "brief", "detail")

EMBEDDING_MAGIC = b"LGF1"
_U32_MAX = 2**32 - 1
_U16_MAX = 2**16 - 1


@dataclass(frozen=True)
class ImageRecord:
    id: str
    label: int
    split: str
    features: tuple[float, ...] | None = None
    pixels: tuple[int, int, tuple[float, ...]] | None = None  # (h, w, row-major data)

    def __post_init__(self):
        if (self.features is None) == (self.pixels is None):
            raise ValidationError(f"record {self.id!r} must carry exactly one of features or pixels")

    @property
    def has_pixels(self) -> bool:
        return self.pixels is not None

    def source_array(self) -> np.ndarray:
        if self.pixels is not None:
            h, w, data = self.pixels
            return np.asarray(data, dtype=np.float64).reshape(h, w)
        return np.asarray(self.features, dtype=np.float64)

    def to_json(self) -> dict:
        out = {"id": self.id, "label": self.label, "split": self.split}
        if self.pixels is not None:
            h, w, data = self.pixels
            out["pixels"] = {"h": h, "w": w, "data": list(data)}
        else:
            out["features"] = list(self.features)
        return out


@dataclass(frozen=True)
class CaptionRecord:
    image_id: str
    prompt_type: str
    text: str

    def to_json(self) -> dict:
        return {"image_id": self.image_id, "prompt_type": self.prompt_type, "text": self.text}


@dataclass
class Manifest:
    num_classes: int
    records: list[ImageRecord]
    caption_files: list[str] = field(default_factory=list)

    def split(self, name: str) -> list[ImageRecord]:
        return [r for r in self.records if r.split == name]

    def by_id(self) -> dict[str, ImageRecord]:
        return {r.id: r for r in self.records}


class Captions:
    """Caption lookup keyed by ``(image_id, prompt_type)``."""

    def __init__(self, records: list[CaptionRecord] = ()):
        self._table: dict[tuple[str, str], str] = {}
        for r in records:
            self._table[(r.image_id, r.prompt_type)] = r.text

    def get(self, image_id: str, prompt_type: str) -> str | None:
        return self._table.get((image_id, prompt_type))

    def __contains__(self, key) -> bool:
        return key in self._table

    def __len__(self) -> int:
        return len(self._table)

    def records(self) -> list[CaptionRecord]:
        return [CaptionRecord(i, p, t) for (i, p), t in self._table.items()]


def _parse_record(obj, where: str) -> ImageRecord:
    if not isinstance(obj, dict):
        raise ValidationError(f"{where}: record must be a JSON object")
    rid, label, split = obj.get("id"), obj.get("label"), obj.get("split")
    if not isinstance(rid, str) or not rid:
        raise ValidationError(f"{where}: 'id' must be a non-empty string")
    if not isinstance(label, int) or isinstance(label, bool) or label < 0:
        raise ValidationError(f"{where}: 'label' must be an integer >= 0")
    if split not in SPLITS:
        raise ValidationError(f"{where}: 'split' must be one of {SPLITS}, got {split!r}")
    has_f, has_p = "features" in obj, "pixels" in obj
    if has_f == has_p:
        raise ValidationError(f"{where}: exactly one of 'features' or 'pixels' is required")
    try:
        if has_f:
            feats = tuple(float(v) for v in obj["features"])
            if not feats or not np.isfinite(feats).all():
                raise ValueError("features must be a non-empty list of finite numbers")
            return ImageRecord(rid, label, split, features=feats)
        px = obj["pixels"]
        h, w = int(px["h"]), int(px["w"])
        data = tuple(float(v) for v in px["data"])
        if h < 1 or w < 1 or len(data) != h * w:
            raise ValueError(f"pixels need h*w={h * w} values, got {len(data)}")
        if not all(0.0 <= v <= 1.0 for v in data):
            raise ValueError("pixel values must lie in [0, 1]")
        return ImageRecord(rid, label, split, pixels=(h, w, data))
    except (TypeError, ValueError, KeyError) as exc:
        raise ValidationError(f"{where}: {exc}") from exc


def _iter_jsonl(path: Path):
    try:
        text = path.read_text(encoding="utf-8")
    except UnicodeDecodeError as exc:
        raise ValidationError(f"{path}: not valid UTF-8") from exc
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            yield lineno, json.loads(line)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from exc


def load_captions(path, known_ids=None) -> list[CaptionRecord]:
    path = Path(path)
    out = []
    for lineno, obj in _iter_jsonl(path):
        where = f"{path}:{lineno}"
        if not isinstance(obj, dict):
            raise ValidationError(f"{where}: caption must be a JSON object")
        iid, ptype, text = obj.get("image_id"), obj.get("prompt_type"), obj.get("text")
        if not isinstance(iid, str) or not isinstance(text, str):
            raise ValidationError(f"{where}: 'image_id' and 'text' must be strings")
        if ptype not in PROMPT_TYPES:
            raise ValidationError(f"{where}: 'prompt_type' must be one of {PROMPT_TYPES}, got {ptype!r}")
        if known_ids is not None and iid not in known_ids:
            raise ValidationError(f"{where}: caption refers to unknown image_id {iid!r}")
        out.append(CaptionRecord(iid, ptype, text))
    return out


def load_manifest(path, require_captions: bool = False) -> Manifest:
    """Read and validate a JSON Lines manifest.

    An optional first line ``{"num_classes": K, "caption_files": [...]}`` is
    the header; caption paths are relative to the manifest's directory. Without
    a header the class count is inferred from the labels. Caption files that
    do not exist are skipped unless ``require_captions`` is set.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    header = None
    records: list[ImageRecord] = []
    seen: dict[str, int] = {}
    for lineno, obj in _iter_jsonl(path):
        where = f"{path}:{lineno}"
        if header is None and not records and isinstance(obj, dict) and "num_classes" in obj and "id" not in obj:
            header = obj
            continue
        rec = _parse_record(obj, where)
        if rec.id in seen:
            raise ValidationError(f"{where}: duplicate id {rec.id!r} (first seen on line {seen[rec.id]})")
        seen[rec.id] = lineno
        records.append(rec)

    labels = {r.label for r in records}
    if header is not None:
        num_classes = header["num_classes"]
        if not isinstance(num_classes, int) or num_classes < 1:
            raise ValidationError(f"{path}: header num_classes must be a positive integer")
        bad = [r.id for r in records if r.label >= num_classes]
        if bad:
            raise ValidationError(f"{path}: label >= num_classes={num_classes} for ids {bad[:5]}")
        caption_files = list(header.get("caption_files", []))
    else:
        num_classes = max(labels) + 1 if labels else 0
        caption_files = []
    missing = sorted(set(range(num_classes)) - labels)
    if records and missing:
        raise ValidationError(f"{path}: class indices are not dense, missing {missing[:10]}")

    for cf in caption_files:
        cpath = path.parent / cf
        if cpath.is_file():
            load_captions(cpath, known_ids=seen)
        elif require_captions:
            raise FileNotFoundError(f"caption file not found: {cpath}")
    return Manifest(num_classes, records, caption_files)


def load_manifest_captions(manifest_path, manifest: Manifest) -> Captions:
    base = Path(manifest_path).parent
    recs = []
    for cf in manifest.caption_files:
        if not (base / cf).is_file():
            raise FileNotFoundError(f"caption file not found: {base / cf}")
        recs.extend(load_captions(base / cf))
    return Captions(recs)


def write_manifest(path, manifest: Manifest) -> None:
    path = Path(path)
    lines = [json.dumps({"num_classes": manifest.num_classes, "caption_files": manifest.caption_files})]
    lines += [json.dumps(r.to_json()) for r in manifest.records]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_captions(path, captions) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for c in captions:
            fh.write(json.dumps(c.to_json(), ensure_ascii=False) + "\n")


def write_embeddings(path, ids, matrix) -> None:
    """``LGF1`` | u32 N | u32 C | N x (u16 len + UTF-8 id) | N*C f32, all little-endian.

    Values are stored as float32.
    """
    mat = np.asarray(getattr(matrix, "data", matrix), dtype=np.float64)
    if mat.ndim != 2:
        raise FormatError(f"embedding matrix must be 2-D, got shape {mat.shape}")
    n, c = mat.shape
    if n != len(ids):
        raise FormatError(f"{len(ids)} ids for a matrix with {n} rows")
    if n > _U32_MAX or c > _U32_MAX:
        raise FormatError("embedding dimensions overflow u32")
    parts = [EMBEDDING_MAGIC, struct.pack("<II", n, c)]
    for i in ids:
        raw = str(i).encode("utf-8")
        if len(raw) > _U16_MAX:
            raise FormatError(f"id longer than {_U16_MAX} bytes")
        parts.append(struct.pack("<H", len(raw)) + raw)
    parts.append(mat.astype("<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_embeddings(path) -> tuple[list[str], np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:4] != EMBEDDING_MAGIC:
        raise FormatError(f"{path}: bad magic {buf[:4]!r}, expected {EMBEDDING_MAGIC!r}")
    if len(buf) < 12:
        raise FormatError(f"{path}: truncated header")
    n, c = struct.unpack_from("<II", buf, 4)
    off = 12
    ids = []
    for _ in range(n):
        if off + 2 > len(buf):
            raise FormatError(f"{path}: truncated id table")
        (ln,) = struct.unpack_from("<H", buf, off)
        off += 2
        if off + ln > len(buf):
            raise FormatError(f"{path}: truncated id table")
        ids.append(buf[off:off + ln].decode("utf-8"))
        off += ln
    need = n * c * 4
    if len(buf) - off != need:
        raise FormatError(f"{path}: expected {need} bytes of float data, found {len(buf) - off}")
    mat = np.frombuffer(buf, dtype="<f4", count=n * c, offset=off).astype(np.float64).reshape(n, c)
    return ids, mat


# --- Synthetic data -------------------------------------------------------

_ONSETS = ("b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z")
_VOWELS = ("a", "e", "i", "o", "u")
_OBJECTS = ("sneaker", "handbag", "tshirt", "hoodie", "cap", "backpack", "jacket", "wallet", "belt", "scarf")
_COLORS = ("black", "white", "red", "blue", "green", "grey", "beige", "navy")
_DISTRACTORS = (
    "background", "studio", "lighting", "shadow", "fabric", "stitching", "texture", "model",
    "wooden", "table", "folded", "angle", "pocket", "zipper", "strap", "sleeve", "collar",
    "outdoor", "soft", "bright", "pattern", "cotton", "leather", "metal", "detail",
)


def class_token(k: int) -> str:
    """Pronounceable brand word for class ``k`` (unique per index)."""
    syl = len(_ONSETS) * len(_VOWELS)
    parts = []
    n = k
    for _ in range(3):
        n, r = divmod(n, syl)
        parts.append(_ONSETS[r // len(_VOWELS)] + _VOWELS[r % len(_VOWELS)])
    return "".join(parts) + "x"


@dataclass
class SyntheticSpec:
    """Controllable class structure for toy experiments.

    Confusable pairs share nearly the same visual prototype; their captions
    name the true brand with probability ``caption_informativeness`` and a
    pair-shared word otherwise. ``nuisance_dim`` extra feature coordinates
    carry per-sample "product content" unrelated to the class.
    """

    num_classes: int = 8
    samples_per_class: int = 40
    visual_dim: int = 32
    visual_noise: float = 0.1
    confusable_pairs: list[tuple[int, int]] = field(default_factory=list)
    caption_informativeness: float = 1.0
    seed: int = 0
    nuisance_dim: int = 0
    nuisance_scale: float = 0.0
    confusable_distance: float = 0.04
    train_fraction: float = 0.5
    gallery_fraction: float = 0.25
    as_pixels: bool = False

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ValidationError("num_classes must be >= 2")
        if self.samples_per_class < 1:
            raise ValidationError("samples_per_class must be >= 1")
        if self.visual_dim < 2:
            raise ValidationError("visual_dim must be >= 2")
        if self.visual_noise < 0 or self.nuisance_scale < 0:
            raise ValidationError("noise scales must be >= 0")
        if not 0.0 <= self.caption_informativeness <= 1.0:
            raise ValidationError("caption_informativeness must lie in [0, 1]")
        if not 0.0 <= self.confusable_distance < 0.05:
            raise ValidationError("confusable_distance must lie in [0, 0.05)")
        used = set()
        for pair in self.confusable_pairs:
            a, b = pair
            if not (0 <= a < self.num_classes and 0 <= b < self.num_classes) or a == b:
                raise ValidationError(f"confusable pair {pair} references invalid classes")
            if a in used or b in used:
                raise ValidationError(f"class in pair {pair} already belongs to another pair")
            used.update((a, b))
        if not (0 < self.train_fraction and 0 <= self.gallery_fraction and self.train_fraction + self.gallery_fraction <= 1):
            raise ValidationError("train/gallery fractions must be positive and sum to at most 1")
        if self.as_pixels and int(round((self.visual_dim + self.nuisance_dim) ** 0.5)) ** 2 != self.visual_dim + self.nuisance_dim:
            raise ValidationError("as_pixels requires visual_dim + nuisance_dim to be a perfect square")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["confusable_pairs"] = [list(p) for p in self.confusable_pairs]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValidationError(f"unknown synthetic spec keys: {sorted(unknown)}")
        d["confusable_pairs"] = [tuple(p) for p in d.get("confusable_pairs", [])]
        return cls(**d)


def synthetic_prototypes(spec: SyntheticSpec) -> np.ndarray:
    """Unit-norm class prototypes; pair partners sit ``confusable_distance`` apart."""
    rng = np.random.default_rng([spec.seed, 0])
    protos = rng.standard_normal((spec.num_classes, spec.visual_dim))
    protos /= np.linalg.norm(protos, axis=1, keepdims=True)
    for a, b in spec.confusable_pairs:
        step = rng.standard_normal(spec.visual_dim)
        step -= step.dot(protos[a]) * protos[a]
        step *= spec.confusable_distance / np.linalg.norm(step)
        p = protos[a] + step
        protos[b] = p / np.linalg.norm(p)
    return protos


def _pair_map(spec: SyntheticSpec) -> dict[int, int]:
    out = {}
    for i, (a, b) in enumerate(spec.confusable_pairs):
        out[a] = out[b] = i
    return out


def _sample_rng(spec: SyntheticSpec, label: int, j: int, pair: int | None) -> np.random.Generator:
    # Keyed by pair rather than class, so sample j of both pair partners shows
    # the same product and draws the same template words.
    if pair is not None:
        return np.random.default_rng([spec.seed, 2, 0, pair, j])
    return np.random.default_rng([spec.seed, 2, 1, label, j])


def _captions_for(g: np.random.Generator, label: int, informative: bool, pair: int | None, obj_idx: int):
    token = class_token(label) if informative or pair is None else f"shared{class_token(pair)}"
    obj = _OBJECTS[obj_idx]
    color = _COLORS[int(g.integers(len(_COLORS)))]
    ocr_noise = [_DISTRACTORS[int(i)] for i in g.integers(len(_DISTRACTORS), size=2)]
    ocr = f"{class_token(label).upper()} {' '.join(ocr_noise)}"
    brief = f"A {color} {obj} with the {token} logo."
    words = [_DISTRACTORS[int(i)] for i in g.integers(len(_DISTRACTORS), size=10)]
    detail = (
        f"The image shows a {color} {obj} photographed on a {words[0]} {words[1]}. "
        f"There is {words[2]} {words[3]} and a {words[4]} {words[5]} near the {words[6]}. "
        f"A small {token} logo appears on the {words[7]}. "
        f"The {words[8]} looks {words[9]}."
    )
    return {"ocr": ocr, "brief": brief, "detail": detail}


def generate_synthetic(spec: SyntheticSpec) -> tuple[Manifest, list[CaptionRecord]]:
    """Deterministic manifest plus ocr/brief/detail captions for every image."""
    spec.validate()
    protos = synthetic_prototypes(spec)
    pair_of = _pair_map(spec)
    rng = np.random.default_rng([spec.seed, 1])
    n_train = max(1, int(round(spec.samples_per_class * spec.train_fraction)))
    n_gallery = int(round(spec.samples_per_class * spec.gallery_fraction))
    records, captions = [], []
    obj_dirs = rng.standard_normal((len(_OBJECTS), spec.nuisance_dim)) if spec.nuisance_dim else None
    side = int(round((spec.visual_dim + spec.nuisance_dim) ** 0.5))
    for label in range(spec.num_classes):
        for j in range(spec.samples_per_class):
            x = protos[label] + spec.visual_noise * rng.standard_normal(spec.visual_dim)
            g = _sample_rng(spec, label, j, pair_of.get(label))
            obj_idx = int(g.integers(len(_OBJECTS)))
            if spec.nuisance_dim:
                content = obj_dirs[obj_idx] + 0.5 * rng.standard_normal(spec.nuisance_dim)
                x = np.concatenate([x, spec.nuisance_scale * content])
            informative = bool(rng.random() < spec.caption_informativeness)
            split = "train" if j < n_train else "gallery" if j < n_train + n_gallery else "query"
            rid = f"c{label:03d}_{j:04d}"
            if spec.as_pixels:
                px = np.clip(0.5 + 0.25 * x, 0.0, 1.0)
                rec = ImageRecord(rid, label, split, pixels=(side, side, tuple(float(v) for v in px)))
            else:
                rec = ImageRecord(rid, label, split, features=tuple(float(v) for v in x))
            records.append(rec)
            texts = _captions_for(g, label, informative, pair_of.get(label), obj_idx)
            captions.extend(CaptionRecord(rid, p, texts[p]) for p in PROMPT_TYPES)
    return Manifest(spec.num_classes, records, ["captions.jsonl"]), captions
