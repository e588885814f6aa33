import json

import numpy as np
import pytest

from cafe_micro.data import (
    COLORS,
    SHAPES,
    generate_pairs,
    generate_scene,
    load_split,
    make_scene,
    read_dataset,
    render_caption,
    render_patches,
    split_ids,
    write_dataset,
    write_split,
)
from cafe_micro.errors import DataError, ParseError


def test_generate_scene_deterministic():
    a = generate_scene(np.random.default_rng(11))
    b = generate_scene(np.random.default_rng(11))
    assert a == b


def test_scene_invariants_over_many_draws():
    rng = np.random.default_rng(0)
    for _ in range(10_000):
        s = generate_scene(rng)
        cells = [(o.row, o.col) for o in s.objects]
        assert len(set(cells)) == len(cells)
        assert cells == sorted(cells)
        assert 1 <= len(cells) <= 3


def test_one_object_frequency():
    # 99.9% binomial interval for p = 1/3, n = 30000 is about [0.3245, 0.3421]
    rng = np.random.default_rng(2024)
    ones = sum(len(generate_scene(rng).objects) == 1 for _ in range(30_000))
    assert 0.323 <= ones / 30_000 <= 0.343


def test_caption_single_object():
    assert render_caption(make_scene([("red", "square", 1, 2)])) == "a red square at row one column two"


def test_caption_canonical_order():
    s = make_scene([("blue", "circle", 2, 1), ("green", "triangle", 0, 0)])
    assert render_caption(s) == (
        "a green triangle at row zero column zero and a blue circle at row two column one"
    )


def test_captions_injective_random():
    rng = np.random.default_rng(5)
    seen = {}
    for _ in range(10_000):
        s = generate_scene(rng)
        c = render_caption(s)
        assert seen.setdefault(c, s) == s


def test_captions_injective_exhaustive_single_objects():
    caps = {
        render_caption(make_scene([(c, s, r, k)])) for c in COLORS for s in SHAPES for r in range(3) for k in range(3)
    }
    assert len(caps) == 4 * 3 * 9 == 108


def test_patches_layout():
    s = make_scene([("red", "square", 0, 0), ("yellow", "triangle", 2, 2)])
    p = render_patches(s)
    assert p.shape == (9, 7)
    np.testing.assert_array_equal(p[0], [1, 0, 0, 0, 1, 0, 0])
    np.testing.assert_array_equal(p[8], [0, 0, 0, 1, 0, 0, 1])
    assert not p[1:8].any()
    assert p.sum() == 2 * 2


def test_invalid_scene_rejected():
    with pytest.raises(DataError):
        make_scene([("red", "square", 0, 0), ("blue", "circle", 0, 0)])
    with pytest.raises(DataError):
        make_scene([("purple", "square", 0, 0)])


def test_generate_pairs_distinct_and_deterministic():
    a = generate_pairs(300, seed=3)
    assert a == generate_pairs(300, seed=3)
    assert len({p.scene for p in a}) == 300
    assert [p.id for p in a] == list(range(300))


def test_split_disjoint():
    pairs = generate_pairs(120, seed=1)
    sp = split_ids(pairs, 20, seed=1)
    assert len(sp["heldout"]) == 20 and len(sp["train"]) == 100
    assert not set(sp["train"]) & set(sp["heldout"])
    scenes = {p.id: p.scene for p in pairs}
    assert not {scenes[i] for i in sp["train"]} & {scenes[i] for i in sp["heldout"]}


def test_dataset_roundtrip(tmp_path):
    pairs = generate_pairs(100, seed=9)
    path = tmp_path / "pairs.jsonl"
    write_dataset(pairs, path)
    back = read_dataset(path)
    assert back == pairs
    np.testing.assert_array_equal(back[5].patches, pairs[5].patches)


def test_schema(tmp_path):
    path = tmp_path / "p.jsonl"
    write_dataset(generate_pairs(3, seed=0), path)
    rec = json.loads(path.read_text().splitlines()[0])
    assert set(rec) == {"id", "caption", "scene"}
    assert set(rec["scene"]) == {"grid", "objects"}
    assert set(rec["scene"]["objects"][0]) == {"color", "shape", "row", "col"}


def test_empty_file(tmp_path):
    path = tmp_path / "empty.jsonl"
    path.write_text("")
    assert read_dataset(path) == []


def test_unknown_color_names_line(tmp_path):
    path = tmp_path / "bad.jsonl"
    write_dataset(generate_pairs(3, seed=0), path)
    lines = path.read_text().splitlines()
    rec = json.loads(lines[1])
    rec["scene"]["objects"][0]["color"] = "purple"
    lines[1] = json.dumps(rec)
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(ParseError, match="line 2") as info:
        read_dataset(path)
    assert info.value.line == 2


def test_malformed_json_line(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text('{"id": 0,\n')
    with pytest.raises(ParseError, match="line 1"):
        read_dataset(path)


def test_load_split_directory(tmp_path):
    pairs = generate_pairs(30, seed=0)
    write_dataset(pairs, tmp_path / "pairs.jsonl")
    sp = split_ids(pairs, 5, seed=0)
    write_split(sp, tmp_path / "split.json")
    held = load_split(tmp_path, "heldout")
    assert [p.id for p in held] == sp["heldout"]
    assert len(load_split(tmp_path, "all")) == 30
    assert len(load_split(tmp_path / "pairs.jsonl")) == 30
    with pytest.raises(DataError):
        load_split(tmp_path / "nope.jsonl")
