import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from logofuse.data import (ImageRecord, SyntheticSpec, generate_synthetic, load_captions,
                           load_manifest, load_manifest_captions, read_embeddings, synthetic_prototypes,
                           write_captions, write_embeddings, write_manifest)
from logofuse.errors import FormatError, ValidationError


def write_lines(path, objs):
    path.write_text("".join(json.dumps(o) + "\n" for o in objs))


def test_two_line_manifest(tmp_path):
    p = tmp_path / "m.jsonl"
    write_lines(p, [{"id": "a", "label": 0, "split": "train", "features": [1, 2]},
                    {"id": "b", "label": 1, "split": "query", "features": [3, 4]}])
    m = load_manifest(p)
    assert len(m.records) == 2 and m.num_classes == 2
    assert m.records[1].source_array().tolist() == [3, 4]


def test_duplicate_id_is_named(tmp_path):
    p = tmp_path / "m.jsonl"
    rec = {"id": "dup7", "label": 0, "split": "train", "features": [1.0]}
    write_lines(p, [rec, rec])
    with pytest.raises(ValidationError, match="dup7"):
        load_manifest(p)


def test_malformed_line_reports_line_number(tmp_path):
    p = tmp_path / "m.jsonl"
    p.write_text(json.dumps({"id": "a", "label": 0, "split": "train", "features": [1]}) + "\n{oops\n")
    with pytest.raises(ValidationError, match=":2"):
        load_manifest(p)


def test_label_beyond_header(tmp_path):
    p = tmp_path / "m.jsonl"
    write_lines(p, [{"num_classes": 1}, {"id": "a", "label": 3, "split": "train", "features": [1]}])
    with pytest.raises(ValidationError):
        load_manifest(p)


def test_dangling_caption_reference(tmp_path):
    write_lines(tmp_path / "caps.jsonl", [{"image_id": "ghost", "prompt_type": "brief", "text": "x"}])
    p = tmp_path / "m.jsonl"
    write_lines(p, [{"num_classes": 1, "caption_files": ["caps.jsonl"]},
                    {"id": "a", "label": 0, "split": "train", "features": [1]}])
    with pytest.raises(ValidationError, match="ghost"):
        load_manifest(p)


def test_bad_prompt_type(tmp_path):
    p = tmp_path / "c.jsonl"
    write_lines(p, [{"image_id": "a", "prompt_type": "poem", "text": "x"}])
    with pytest.raises(ValidationError):
        load_captions(p)


def test_manifest_and_captions_round_trip(tmp_path):
    spec = SyntheticSpec(num_classes=3, samples_per_class=4, visual_dim=4, seed=2)
    m, caps = generate_synthetic(spec)
    write_manifest(tmp_path / "manifest.jsonl", m)
    write_captions(tmp_path / "captions.jsonl", caps)
    m2 = load_manifest(tmp_path / "manifest.jsonl", require_captions=True)
    assert m2.records == m.records and m2.num_classes == 3
    got = load_manifest_captions(tmp_path / "manifest.jsonl", m2)
    assert len(got) == len(caps)
    assert got.get(caps[0].image_id, caps[0].prompt_type) == caps[0].text


def test_synthetic_is_deterministic(tmp_path):
    spec = SyntheticSpec(seed=1, confusable_pairs=[(0, 1)])
    for name in ("a", "b"):
        m, caps = generate_synthetic(spec)
        (tmp_path / name).mkdir()
        write_manifest(tmp_path / name / "m.jsonl", m)
        write_captions(tmp_path / name / "c.jsonl", caps)
    for f in ("m.jsonl", "c.jsonl"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_confusable_prototypes_are_close():
    spec = SyntheticSpec(confusable_pairs=[(0, 1)], visual_noise=0.0)
    p = synthetic_prototypes(spec)
    assert np.linalg.norm(p[0] - p[1]) / np.linalg.norm(p[0]) < 0.05
    m, _ = generate_synthetic(spec)
    by_label = {r.label: r.source_array() for r in m.records}
    assert np.linalg.norm(by_label[0] - by_label[1]) / np.linalg.norm(by_label[0]) < 0.05
    # Unpaired classes stay far apart.
    assert np.linalg.norm(p[2] - p[3]) > 0.5


def test_uninformative_captions_identical_across_pair():
    spec = SyntheticSpec(num_classes=4, samples_per_class=6, confusable_pairs=[(0, 1)], caption_informativeness=0.0)
    _, caps = generate_synthetic(spec)
    text = {(c.image_id, c.prompt_type): c.text for c in caps}
    for j in range(6):
        for p in ("brief", "detail"):
            assert text[(f"c000_{j:04d}", p)] == text[(f"c001_{j:04d}", p)]


def test_caption_shapes():
    spec = SyntheticSpec(num_classes=3, samples_per_class=3)
    _, caps = generate_synthetic(spec)
    from logofuse.data import class_token
    for c in caps:
        label = int(c.image_id[1:4])
        if c.prompt_type == "ocr":
            assert class_token(label) in c.text.lower()
        if c.prompt_type == "brief":
            assert c.text.count(".") == 1 and len(c.text.split()) < 12
        if c.prompt_type == "detail":
            assert c.text.count(".") == 4
    assert {c.prompt_type for c in caps} == {"ocr", "brief", "detail"}


def test_informative_captions_name_the_class():
    spec = SyntheticSpec(num_classes=4, samples_per_class=10, confusable_pairs=[(0, 1)], caption_informativeness=1.0)
    _, caps = generate_synthetic(spec)
    from logofuse.data import class_token
    for c in caps:
        if c.prompt_type == "brief":
            assert class_token(int(c.image_id[1:4])) in c.text


def test_spec_validation():
    with pytest.raises(ValidationError):
        SyntheticSpec(confusable_pairs=[(0, 99)]).validate()
    with pytest.raises(ValidationError):
        SyntheticSpec(visual_noise=-1).validate()
    with pytest.raises(ValidationError):
        SyntheticSpec(caption_informativeness=1.5).validate()
    with pytest.raises(ValidationError):
        SyntheticSpec.from_dict({"bogus": 1})


def test_pixel_records():
    spec = SyntheticSpec(num_classes=2, samples_per_class=2, visual_dim=16, as_pixels=True)
    m, _ = generate_synthetic(spec)
    assert m.records[0].has_pixels and m.records[0].source_array().shape == (4, 4)


def test_record_needs_exactly_one_source():
    with pytest.raises(ValidationError):
        ImageRecord("a", 0, "train")
    with pytest.raises(ValidationError):
        ImageRecord("a", 0, "train", features=(1.0,), pixels=(1, 1, (1.0,)))


# --- embedding files ---------------------------------------------------------


def test_embeddings_round_trip(tmp_path, rng):
    mat = rng.standard_normal((3, 4)).astype(np.float32)
    write_embeddings(tmp_path / "e.lgf", ["a", "bb", "ccc"], mat)
    ids, got = read_embeddings(tmp_path / "e.lgf")
    assert ids == ["a", "bb", "ccc"] and np.array_equal(got, mat)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.text(min_size=1, max_size=8), max_size=6, unique=True), st.integers(1, 5))
def test_embeddings_round_trip_property(tmp_path_factory, ids, c):
    path = tmp_path_factory.mktemp("emb") / "e.lgf"
    mat = np.arange(len(ids) * c, dtype=np.float32).reshape(len(ids), c) / 7
    write_embeddings(path, ids, mat)
    got_ids, got = read_embeddings(path)
    assert got_ids == ids and np.array_equal(got, mat.reshape(len(ids), c))


def test_empty_embedding_file(tmp_path):
    write_embeddings(tmp_path / "e.lgf", [], np.zeros((0, 4)))
    ids, mat = read_embeddings(tmp_path / "e.lgf")
    assert ids == [] and mat.shape[0] == 0


def test_embedding_file_errors(tmp_path, rng):
    p = tmp_path / "e.lgf"
    write_embeddings(p, ["a", "b"], rng.standard_normal((2, 3)))
    raw = p.read_bytes()
    p.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(FormatError, match="magic"):
        read_embeddings(p)
    p.write_bytes(raw[:-3])
    with pytest.raises(FormatError):
        read_embeddings(p)
    # Header claims far more rows than the file holds.
    p.write_bytes(raw[:4] + (2**31).to_bytes(4, "little") + raw[8:])
    with pytest.raises(FormatError):
        read_embeddings(p)
    with pytest.raises(FormatError):
        write_embeddings(p, ["a"], rng.standard_normal((2, 3)))
