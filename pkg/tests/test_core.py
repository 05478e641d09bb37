import pytest
from hypothesis import given
from hypothesis import strategies as st

from coverhead.core import (
    DEFAULT_REGISTRY,
    SCHMIDT_BINS,
    Annotation,
    ConfigError,
    DomainError,
    ParseError,
    SpeciesRegistry,
    annotations_to_csv,
    parse_kv,
    read_annotations,
    schmidt_quantize,
    validate_cover,
    write_annotations,
)


def _nearest_bin_scan(p):
    # linear scan; strict < keeps the first (lower) bin on ties
    best = SCHMIDT_BINS[0]
    for b in SCHMIDT_BINS[1:]:
        if abs(p - b) < abs(p - best):
            best = b
    return best


def test_default_registry_order():
    assert DEFAULT_REGISTRY.names == (
        "Ach_mil", "Cen_jac", "Lot_cor", "Med_lup", "Pla_lan",
        "Sco_aut", "Tri_pra", "Grasses", "Dead_litter",
    )
    assert DEFAULT_REGISTRY.count == 9


@pytest.mark.parametrize("names", [(), ("a", "a"), ("a", "")])
def test_registry_rejects_bad_names(names):
    with pytest.raises(ConfigError):
        SpeciesRegistry(names)


def test_schmidt_scale_shape():
    assert len(SCHMIDT_BINS) == 19
    assert SCHMIDT_BINS[0] == 0 and SCHMIDT_BINS[-1] == 100
    assert all(a < b for a, b in zip(SCHMIDT_BINS, SCHMIDT_BINS[1:]))


@pytest.mark.parametrize("p, expected", [(0, 0), (100, 100), (12, 10), (2, 1)])
def test_quantize_examples(p, expected):
    assert schmidt_quantize(p) == expected
    assert _nearest_bin_scan(p) == expected


@pytest.mark.parametrize("p", [-0.1, 100.5, float("nan")])
def test_quantize_out_of_range(p):
    with pytest.raises(DomainError):
        schmidt_quantize(p)


@given(st.floats(min_value=0, max_value=100))
def test_quantize_matches_scan_and_is_idempotent(p):
    q = schmidt_quantize(p)
    assert q in SCHMIDT_BINS
    assert q == _nearest_bin_scan(p)
    assert schmidt_quantize(q) == q


def test_validate_cover():
    assert validate_cover([0.0] * 9).valid
    bad = validate_cover([0, 0, 101, 0])
    assert not bad and bad.violations == ((2, 101.0),)
    # occlusion-ignored covers may sum far above 100
    assert validate_cover([100, 50, 50]).valid


def test_annotation_week_range():
    with pytest.raises(DomainError):
        Annotation(0, 0, 19, (0.0,) * 9)


def test_annotation_csv_round_trip(tmp_path):
    rows = [Annotation(3, 1, 7, (0.5, 0, 1, 3, 5, 8, 10, 15, 100)), Annotation(0, 0, 1, (0,) * 9)]
    text = annotations_to_csv(rows)
    assert text.splitlines()[0] == "unit,camera,week," + ",".join(DEFAULT_REGISTRY.names)
    path = tmp_path / "a.csv"
    write_annotations(path, rows)
    registry, back = read_annotations(path)
    assert registry == DEFAULT_REGISTRY
    assert back == rows


def test_registry_order_survives_csv(tmp_path):
    reg = SpeciesRegistry(("z", "a", "m"))
    path = tmp_path / "a.csv"
    write_annotations(path, [Annotation(0, 0, 1, (1, 2, 3))], reg)
    assert read_annotations(path)[0].names == ("z", "a", "m")


def test_read_annotations_rejects_bad_header(tmp_path):
    path = tmp_path / "a.csv"
    path.write_text("u,c,w,x\n")
    with pytest.raises(ParseError):
        read_annotations(path)


def test_parse_kv():
    assert parse_kv("a = 1\n# comment\n\nb=x,y  # trailing\n") == {"a": "1", "b": "x,y"}
    with pytest.raises(ParseError):
        parse_kv("novalue\n")
