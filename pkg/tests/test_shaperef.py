import json

import numpy as np
import numpy.testing as npt
import pytest

from safire import pnm
from safire.shaperef import (BACKGROUND, PALETTE, SIZE_BOX, TOKEN_IDS, VOCAB,
                             ExpressionError, GenConfig, GenerationError,
                             MODES, NounPhrase, Scene, SceneObject,
                             audit_expression, build_split, footprint,
                             gen_expression, gen_sample, gen_scene,
                             load_split, load_vocab, mode_counts,
                             parse_expression, rasterize, resolve,
                             tokens_to_text)


def ids(*names):
    return [TOKEN_IDS[n] for n in names]


def obj(i, shape, color, size, row, col):
    return SceneObject(i, shape, color, size, row, col)


# -- vocabulary ----------------------------------------------------------------------


def test_vocab_has_25_unique_tokens():
    assert len(VOCAB) == 25
    assert len(set(VOCAB)) == 25
    assert all(TOKEN_IDS[name] == i for i, name in enumerate(VOCAB))


# -- footprints ----------------------------------------------------------------------


@pytest.mark.parametrize("shape,size,area", [
    ("square", "small", 16), ("square", "large", 36),
    ("circle", "small", 12), ("circle", "large", 24),
    ("triangle", "small", 12), ("triangle", "large", 24),
])
def test_footprint_pixel_counts(shape, size, area):
    assert footprint(shape, SIZE_BOX[size]).sum() == area


def test_footprints_are_left_right_symmetric():
    for shape in ("square", "circle", "triangle"):
        for box in (4, 6):
            fp = footprint(shape, box)
            npt.assert_array_equal(fp, fp[:, ::-1])


# -- scene generation ----------------------------------------------------------------


def test_same_seed_gives_identical_scene():
    assert gen_scene([3, 1], GenConfig()) == gen_scene([3, 1], GenConfig())


def test_positions_even_and_inside_canvas():
    for i in range(50):
        scene = gen_scene([5, i], GenConfig())
        for o in scene.objects:
            assert o.row % 2 == 0 and o.col % 2 == 0
            assert 0 <= o.row and o.row + o.box <= scene.image_h
            assert 0 <= o.col and o.col + o.box <= scene.image_w


def test_objects_keep_two_pixel_clearance():
    for i in range(50):
        scene = gen_scene([6, i], GenConfig())
        for a in scene.objects:
            for b in scene.objects:
                if a.id >= b.id:
                    continue
                row_gap = max(a.row - (b.row + b.box), b.row - (a.row + a.box))
                col_gap = max(a.col - (b.col + b.box), b.col - (a.col + a.box))
                assert max(row_gap, col_gap) >= 2


def test_per_object_masks_pairwise_disjoint():
    # pixel-level restatement of the non-overlap invariant
    for i in range(30):
        scene = gen_scene([7, i], GenConfig())
        total = np.zeros((scene.image_h, scene.image_w))
        for o in scene.objects:
            fp = footprint(o.shape, o.box)
            total[o.row:o.row + o.box, o.col:o.col + o.box] += fp
        assert total.max() <= 1


def test_distractor_count_mean_near_target():
    counts = []
    i = 0
    while len(counts) < 2000:
        try:
            counts.append(gen_scene([11, i], GenConfig()).same_category_count())
        except GenerationError:
            pass
        i += 1
    assert i - len(counts) < 20
    assert abs(np.mean(counts) - 3.1) < 0.1


def test_simple_mode_distractors_avoid_target_color():
    for i in range(40):
        scene = gen_scene([13, i], GenConfig(mode="simple"))
        t = scene.target
        for o in scene.objects:
            if o.shape == t.shape and o.id != t.id:
                assert o.color != t.color


def test_ambiguous_modes_force_required_objects():
    for i in range(40):
        sd = gen_scene([17, i], GenConfig(mode="object_distracting"))
        assert sd.same_category_count() >= 1
        si = gen_scene([19, i], GenConfig(mode="category_implicit"))
        assert si.same_category_count() >= 1
        assert any(o.shape != si.target.shape for o in si.objects)


def test_single_object_scene_permitted():
    cfg = GenConfig(distractor_mean=0.0, other_max=0, mode="simple")
    s = gen_sample([23], cfg)
    assert len(s.scene.objects) == 1
    assert resolve(s.scene, s.tokens) == (0,)


def test_bad_configs_rejected():
    with pytest.raises(ValueError):
        GenConfig(mode="hard")
    with pytest.raises(ValueError):
        GenConfig(image_h=31)
    with pytest.raises(ValueError):
        GenConfig(distractor_mean=-1.0)


# -- grammar -------------------------------------------------------------------------


def test_parse_simple_noun_phrase():
    p = parse_expression(ids("large", "red", "square"))
    assert p.subject == NounPhrase("large", "red", "square")
    assert p.relations == ()


def test_parse_relational_chain():
    toks = ids("square", "left", "of", "red", "circle",
               "and", "above", "small", "triangle")
    p = parse_expression(toks)
    assert p.subject == NounPhrase(None, None, "square")
    assert [r.kind for r in p.relations] == ["left_of", "above"]
    assert p.relations[0].anchors[0] == NounPhrase(None, "red", "circle")
    assert p.relations[1].anchors[0] == NounPhrase("small", None, "triangle")


def test_parse_between_and_pronoun():
    toks = ids("it", "between", "red", "circle", "and", "blue", "circle")
    p = parse_expression(toks)
    assert p.subject == "it"
    assert p.relations[0].kind == "between"
    assert len(p.relations[0].anchors) == 2


def test_parse_comparative():
    p = parse_expression(ids("he", "large", "than", "green", "triangle"))
    assert p.relations[0].kind == "larger_than"
    p = parse_expression(ids("square", "small", "than", "circle"))
    assert p.relations[0].kind == "smaller_than"


@pytest.mark.parametrize("toks", [
    [],
    ids("red"),
    ids("square", "left", "square"),
    ids("square", "between", "circle"),
    ids("square", "circle"),
    ids("square", "and", "left", "of", "circle"),
    ids("square", "left", "of", "circle", "and"),
    ids("it", "it"),
    [99],
])
def test_malformed_expressions_rejected(toks):
    def parse():
        parse_expression(toks)
    with pytest.raises(ExpressionError):
        parse()


def test_tokens_to_text():
    assert tokens_to_text(ids("red", "square")) == "red square"


# -- resolver ------------------------------------------------------------------------


@pytest.fixture
def two_red_squares():
    objects = (
        obj(0, "square", "red", "small", 0, 0),      # center (1.5, 1.5)
        obj(1, "square", "blue", "small", 0, 10),    # center (1.5, 11.5)
        obj(2, "square", "red", "small", 10, 0),     # center (11.5, 1.5)
        obj(3, "circle", "green", "large", 10, 10),  # center (12.5, 12.5)
    )
    return Scene(32, 32, objects, 0)


def test_unique_attribute_resolves(two_red_squares):
    assert resolve(two_red_squares, ids("blue", "square")) == (1,)


def test_ambiguous_attribute_reports_both(two_red_squares):
    assert resolve(two_red_squares, ids("red", "square")) == (0, 2)


def test_directional_relations(two_red_squares):
    s = two_red_squares
    assert resolve(s, ids("red", "square", "below", "blue", "square")) == (2,)
    assert resolve(s, ids("red", "square", "above", "green", "circle")) == (0, 2)
    # right of a red square: only the blue square; the circle is no square
    assert resolve(s, ids("square", "right", "of", "red", "square")) == (1,)


def test_nearest_is_a_superlative_over_candidates(two_red_squares):
    s = two_red_squares
    # among red squares, object 0 is closest to the blue square (10 vs 14.14)
    toks = ids("red", "square", "nearest", "to", "blue", "square")
    assert resolve(s, toks) == (0,)
    # squares 1 and 2 sit symmetrically about the circle: an exact distance
    # tie comes back as an honest two-way ambiguity
    toks = ids("square", "nearest", "to", "green", "circle")
    assert resolve(s, toks) == (1, 2)


def test_nearest_brute_force_oracle():
    # independent distance-matrix transcription of the superlative
    hits = 0
    for i in range(40):
        scene = gen_scene([29, i], GenConfig(mode="object_distracting"))
        anchor = scene.objects[-1]
        toks = ids(scene.target.shape, "nearest", "to",
                   anchor.size, anchor.color, anchor.shape)
        got = resolve(scene, toks)

        anchors = [o for o in scene.objects
                   if (o.shape, o.color, o.size) ==
                      (anchor.shape, anchor.color, anchor.size)]
        cand = [o for o in scene.objects if o.shape == scene.target.shape]
        expect = set()
        for a in anchors:
            pool = [y for y in cand if y.id != a.id]
            if not pool:
                continue
            d = np.array([np.hypot(y.center[0] - a.center[0],
                                   y.center[1] - a.center[1]) for y in pool])
            expect.update(pool[k].id for k in np.flatnonzero(d == d.min()))
        assert got == tuple(sorted(expect))
        hits += bool(got)
    assert hits > 0


def test_between_band():
    objects = (
        obj(0, "square", "red", "small", 0, 12),     # center (1.5, 13.5)
        obj(1, "circle", "yellow", "small", 0, 0),   # center (1.5, 1.5)
        obj(2, "circle", "blue", "small", 0, 24),    # center (1.5, 25.5)
        obj(3, "square", "red", "small", 14, 12),    # far off the axis
    )
    scene = Scene(32, 32, objects, 0)
    toks = ids("red", "square", "between", "yellow", "circle",
               "and", "blue", "circle")
    assert resolve(scene, toks) == (0,)


def test_comparatives_use_pixel_area():
    objects = (
        obj(0, "square", "red", "small", 0, 0),       # area 16
        obj(1, "square", "red", "large", 0, 10),      # area 36
        obj(2, "triangle", "green", "large", 10, 0),  # area 24
    )
    scene = Scene(32, 32, objects, 0)
    big = ids("red", "square", "large", "than", "green", "triangle")
    small = ids("red", "square", "small", "than", "green", "triangle")
    assert resolve(scene, big) == (1,)
    assert resolve(scene, small) == (0,)


def test_resolver_rejects_malformed():
    scene = Scene(32, 32, (obj(0, "square", "red", "small", 0, 0),), 0)
    with pytest.raises(ExpressionError):
        resolve(scene, ids("red"))


# -- expression generation -----------------------------------------------------------


def test_gen_expression_deterministic():
    scene = gen_scene([31, 0], GenConfig(mode="object_distracting"))
    e1 = gen_expression(scene, "object_distracting", [31, 1])
    e2 = gen_expression(scene, "object_distracting", [31, 1])
    assert e1 == e2


@pytest.mark.parametrize("mode", MODES)
def test_corpus_invariants_hold(mode):
    pronoun_ids = {TOKEN_IDS["it"], TOKEN_IDS["he"]}
    shape_ids = {TOKEN_IDS[s] for s in ("square", "circle", "triangle")}
    for i in range(150):
        s = gen_sample([37, MODES.index(mode), i], GenConfig(mode=mode))
        assert resolve(s.scene, s.tokens) == (s.scene.target_id,)
        assert audit_expression(s.tokens, mode, s.scene.target.shape) is None
        assert len(s.tokens) <= 16
        if mode == "simple":
            assert len(s.tokens) == 2
        elif mode == "object_distracting":
            assert s.tokens[0] not in pronoun_ids
            assert sum(t in shape_ids for t in s.tokens) >= 2
        else:
            assert s.tokens[0] in pronoun_ids
            assert TOKEN_IDS[s.scene.target.shape] not in s.tokens


def test_auditor_flags_violations():
    assert audit_expression(ids("red", "square"), "simple") is None
    assert audit_expression(ids("large", "red", "square"), "simple")
    assert audit_expression(ids("red", "square"), "simple",
                            target_shape="circle")
    assert audit_expression(
        ids("square", "left", "of", "circle"), "object_distracting") is None
    assert audit_expression(
        ids("square", "left", "of", "square"), "object_distracting")
    assert audit_expression(
        ids("it", "above", "red", "circle"), "category_implicit",
        target_shape="square") is None
    assert audit_expression(
        ids("it", "above", "red", "square"), "category_implicit",
        target_shape="square")
    assert audit_expression(
        ids("square", "above", "red", "circle"), "category_implicit",
        target_shape="square")
    assert audit_expression([99], "simple")


# -- rasterization -------------------------------------------------------------------


def test_empty_scene_renders_background():
    img, mask = rasterize(Scene(8, 8, (), None))
    npt.assert_array_equal(img, BACKGROUND)
    npt.assert_array_equal(mask, 0.0)


def test_full_canvas_square_mask_area():
    scene = Scene(6, 6, (obj(0, "square", "blue", "large", 0, 0),), 0)
    img, mask = rasterize(scene)
    assert mask.sum() == 36
    npt.assert_array_equal(img, np.broadcast_to(PALETTE["blue"], (6, 6, 3)))


def test_mask_marks_exactly_the_target():
    scene = gen_scene([41, 0], GenConfig(mode="object_distracting"))
    img, mask = rasterize(scene)
    t = scene.target
    fp = footprint(t.shape, t.box)
    expect = np.zeros_like(mask)
    expect[t.row:t.row + t.box, t.col:t.col + t.box][fp] = 1.0
    npt.assert_array_equal(mask, expect)
    npt.assert_array_equal(
        img[mask == 1.0],
        np.broadcast_to(PALETTE[t.color], (int(mask.sum()), 3)))


# -- pnm files -----------------------------------------------------------------------


def test_ppm_round_trip_exact_on_grid(tmp_path):
    rng = np.random.default_rng(0)
    img = rng.integers(0, 256, size=(5, 7, 3)) / 255.0
    pnm.write_ppm(tmp_path / "a.ppm", img)
    npt.assert_array_equal(pnm.read_ppm(tmp_path / "a.ppm"), img)


def test_pgm_round_trip_and_header_comment(tmp_path):
    rng = np.random.default_rng(1)
    img = rng.integers(0, 256, size=(4, 6)) / 255.0
    pnm.write_pgm(tmp_path / "a.pgm", img)
    raw = (tmp_path / "a.pgm").read_bytes()
    commented = raw[:2] + b"\n# a comment\n" + raw[3:]
    (tmp_path / "b.pgm").write_bytes(commented)
    npt.assert_array_equal(pnm.read_pgm(tmp_path / "b.pgm"), img)


def test_pnm_errors(tmp_path):
    with pytest.raises(pnm.PnmError):
        pnm.write_ppm(tmp_path / "x.ppm", np.full((2, 2, 3), 1.5))
    (tmp_path / "bad.ppm").write_bytes(b"P9\n2 2\n255\n")
    with pytest.raises(pnm.PnmError):
        pnm.read_ppm(tmp_path / "bad.ppm")
    (tmp_path / "short.pgm").write_bytes(b"P5\n4 4\n255\nab")
    with pytest.raises(pnm.PnmError):
        pnm.read_pgm(tmp_path / "short.pgm")
    (tmp_path / "deep.pgm").write_bytes(b"P5\n2 2\n65535\n" + b"\0" * 8)
    with pytest.raises(pnm.PnmError):
        pnm.read_pgm(tmp_path / "deep.pgm")


# -- splits --------------------------------------------------------------------------


def test_mode_counts_exact_stratification():
    assert mode_counts(1000, (0.4, 0.3, 0.3)) == [400, 300, 300]
    assert mode_counts(10, (0.34, 0.33, 0.33)) == [4, 3, 3]
    assert mode_counts(7, (0.5, 0.5, 0.0)) == [4, 3, 0]
    assert sum(mode_counts(11, (1, 1, 1))) == 11
    with pytest.raises(ValueError):
        mode_counts(5, (0.5, 0.5))


def test_build_split_layout_and_counts(tmp_path):
    build_split(tmp_path, "train", 12, seed=3, mode_mix=(0.5, 0.25, 0.25))
    assert load_vocab(tmp_path) == VOCAB
    lines = (tmp_path / "train" / "meta.jsonl").read_text().splitlines()
    assert len(lines) == 12
    modes = [json.loads(l)["mode"] for l in lines]
    assert sorted(modes).count("simple") == 6
    assert modes.count("object_distracting") == 3
    assert modes.count("category_implicit") == 3
    for l in lines:
        meta = json.loads(l)
        assert (tmp_path / "train" / meta["image"]).exists()
        assert (tmp_path / "train" / meta["mask"]).exists()


def test_build_split_byte_identical(tmp_path):
    build_split(tmp_path / "a", "val", 6, seed=9)
    build_split(tmp_path / "b", "val", 6, seed=9)
    files_a = sorted(p.relative_to(tmp_path / "a")
                     for p in (tmp_path / "a").rglob("*") if p.is_file())
    files_b = sorted(p.relative_to(tmp_path / "b")
                     for p in (tmp_path / "b").rglob("*") if p.is_file())
    assert files_a == files_b
    for rel in files_a:
        assert (tmp_path / "a" / rel).read_bytes() == \
            (tmp_path / "b" / rel).read_bytes()


def test_split_seeds_disjoint(tmp_path):
    build_split(tmp_path, "train", 8, seed=5)
    build_split(tmp_path, "val", 8, seed=5)
    seeds = {}
    for name in ("train", "val"):
        for line in (tmp_path / name / "meta.jsonl").read_text().splitlines():
            seeds.setdefault(name, set()).add(tuple(json.loads(line)["seed"]))
    assert not seeds["train"] & seeds["val"]


def test_load_split_round_trip(tmp_path):
    build_split(tmp_path, "test", 5, seed=7)
    samples = load_split(tmp_path, "test")
    assert len(samples) == 5
    for s in samples:
        assert s.image.shape == (32, 32, 3)
        assert set(np.unique(s.mask)) <= {0.0, 1.0}
        # masks survive quantization exactly; resolver still singles out
        # the target on the reconstructed scene
        img, mask = rasterize(s.scene)
        npt.assert_array_equal(s.mask, mask)
        npt.assert_allclose(s.image, img, atol=0.5 / 255)
        assert resolve(s.scene, s.tokens) == (s.scene.target_id,)
