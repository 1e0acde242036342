import json

import pytest

from ipv6frag.checksum import ODD, word_sum
from ipv6frag.models import (
    PUBLISHED_TOTAL,
    FragmentSpec,
    Mode,
    ModelKind,
    OverlapModel,
    TestCase,
    build_campaign,
    expand_selection,
    load_model,
    manifest_lines,
    new_model,
    permutation_cases,
    permutations,
    shankar_paxson_model,
    three_fragment_model_suite,
    validate_model_constraints,
)


def test_fragment_spec_validation():
    with pytest.raises(ValueError):
        FragmentSpec("A", -1, 1, True)
    with pytest.raises(ValueError):
        FragmentSpec("A", 1 << 13, 1, True)
    with pytest.raises(ValueError):
        FragmentSpec("A", 0, 0, True, carries_upper_header=True)
    with pytest.raises(ValueError):
        FragmentSpec("A", 0, 1, True, data=b"short")
    assert FragmentSpec("Z", 0, 0, True, data=b"").length_bytes == 0


def test_touching_fragments_do_not_overlap():
    a = FragmentSpec("A", 0, 2, True)
    b = FragmentSpec("B", 2, 2, False)
    c = FragmentSpec("C", 1, 2, False)
    assert not a.overlaps(b)
    assert a.overlaps(c) and c.overlaps(b)
    assert not FragmentSpec("Z", 0, 0, True, data=b"").overlaps(a)


def test_six_fragment_geometries():
    geo = lambda m: {s.label: (s.offset_units, s.length_units, s.m_flag) for s in m.specs}  # noqa: E731
    assert geo(shankar_paxson_model()) == {
        "A": (0, 4, True), "B": (5, 2, True), "C": (7, 3, True),
        "D": (4, 4, True), "E": (7, 3, True), "F": (10, 3, False),
    }
    assert geo(new_model()) == {
        "A": (0, 4, True), "B": (4, 2, True), "C": (6, 3, True),
        "D": (3, 4, True), "E": (6, 3, True), "F": (9, 3, False),
    }
    assert new_model().expected_extent_units == 12


def test_first_fragment_carries_header_then_pattern():
    model = new_model()
    header = bytes(range(8))
    upper = model.canonical_upper(ODD, header)
    a = model.specs[0].fill(ODD, upper)
    assert a[:8] == header
    assert a[8:] == bytes.fromhex("11223344") * 6


def test_canonical_upper_has_same_sum_as_either_hole_free_reassembly():
    model = new_model()
    specs = {s.label: s for s in model.specs}
    upper = model.canonical_upper(ODD)
    for middle in "CE":
        order = ["A", "B", middle, "F"]
        buf = bytearray(model.extent_bytes)
        for label in order:
            s = specs[label]
            buf[s.offset_bytes:s.end_bytes] = s.fill(ODD, upper)
        assert word_sum(bytes(buf)) == word_sum(upper)


def test_permutations_are_lexicographic_and_complete():
    perms = permutations(new_model())
    assert len(perms) == 720 == len(set(perms))
    assert perms[0] == (0, 1, 2, 3, 4, 5) and perms[-1] == (5, 4, 3, 2, 1, 0)


def test_permutation_cases_modes_and_ids():
    cases = permutation_cases(new_model(), (1, 2, 3), first_id=100)
    assert len(cases) == 2160
    by_mode = {m: [c for c in cases if c.mode is m] for m in Mode}
    assert all(len(c.identifications) == 1 and c.repetitions == 1 for c in by_mode[Mode.SINGLE])
    assert all(len(c.identifications) == 1 and c.repetitions == 5 for c in by_mode[Mode.REPEAT_SAME_ID])
    assert all(len(set(c.identifications)) == 5 for c in by_mode[Mode.MULTI_PACKET])
    ids = [i for c in cases for i in c.identifications]
    assert len(ids) == len(set(ids))
    assert len({c.case_id for c in cases}) == 2160
    assert cases[0].case_id == "new-m1-ABCDEF"


def test_test_case_invariants():
    model = new_model()
    with pytest.raises(ValueError):
        TestCase(model, (0, 1, 2, 3, 4, 4), Mode.SINGLE, 1, (1,), "x")
    with pytest.raises(ValueError):
        TestCase(model, tuple(range(6)), Mode.MULTI_PACKET, 5, (1, 1, 2, 3, 4), "x")
    with pytest.raises(ValueError):
        TestCase(model, tuple(range(6)), Mode.REPEAT_SAME_ID, 5, (1, 2), "x")


def test_three_fragment_suite():
    cases = three_fragment_model_suite()
    assert len(cases) == 44
    assert len({c.case_id for c in cases}) == 44
    assert all(len(c.model.specs) == 3 for c in cases)
    assert all(c.has_overlap for c in cases)


def test_selection():
    assert expand_selection("all") == ("sp", "3frag", "new", "rfc9099")
    assert expand_selection(["new", "new", "3frag"]) == ("new", "3frag")
    with pytest.raises(ValueError):
        expand_selection("bogus")


def test_default_campaign_size():
    cases = build_campaign()
    assert len(cases) == 2160 + 44 + 2
    assert len({c.case_id for c in cases}) == len(cases)
    ids = [i for c in build_campaign("all") for i in c.identifications]
    assert len(ids) == len(set(ids))


def test_controls_are_the_non_overlapping_cases():
    cases = build_campaign("all")
    controls = [c for c in cases if c.is_control]
    assert [c.case_id for c in controls] == ["rfc9099-exp1"]


def test_manifest_header_and_records():
    cases = build_campaign(["3frag"])
    lines = list(manifest_lines(cases, ["3frag"]))
    header = json.loads(lines[0])
    assert header["published_total"] == PUBLISHED_TOTAL == 2226
    assert header["cases"] == 44
    rec = json.loads(lines[1])
    assert set(rec) >= {"case_id", "model", "geometry", "arrival_order", "mode", "identifications",
                        "expected_outcome_per_policy"}
    assert rec["expected_outcome_per_policy"]["rfc5722"]["status"] == "Dropped"


def test_model_json_round_trip(tmp_path):
    model = new_model()
    path = tmp_path / "m.json"
    path.write_text(json.dumps(model.to_dict()))
    assert load_model(str(path)) == model
    custom = OverlapModel.from_dict({"name": "x", "specs": [{"label": "A", "offset": 0, "length": 1, "m": 0}]})
    assert custom.kind is ModelKind.CUSTOM


def test_constraints_hold_for_both_six_fragment_models():
    for model in (new_model(), shankar_paxson_model()):
        failed = [c for c in validate_model_constraints(model) if not c.satisfied]
        assert failed == []
    names = {c.name for c in validate_model_constraints(new_model())}
    assert "hole-free-outcomes" in names
