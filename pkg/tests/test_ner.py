import pytest
from hypothesis import given
from hypothesis import strategies as st

from fastcall.errors import InvalidInputError
from fastcall.ner import (
    EntityDictionary,
    EntitySpan,
    extract_entities,
    fill_template,
    load_dictionaries,
    template_for,
    templatize,
)

PAPER_QUERY = "play Jay Chou's Fragrance of Rice"


def paper_dictionary():
    return EntityDictionary(
        entries={"Jay Chou": "artist", "Fragrance of Rice": "song", "Listen to Mom": "song"},
        type_priority=("song", "artist", "genre", "movie"),
    )


def test_load_dictionaries_merges_files(tmp_path):
    artist = tmp_path / "artists.tsv"
    artist.write_text("Jay Chou\tartist\n", encoding="utf-8")
    song = tmp_path / "songs.tsv"
    song.write_text("# song titles\nFragrance of Rice\tsong\n", encoding="utf-8")
    dictionary, diagnostics = load_dictionaries([artist, song])
    assert dictionary.entries == {"Jay Chou": "artist", "Fragrance of Rice": "song"}
    assert diagnostics == []


def test_load_dictionaries_empty():
    dictionary, diagnostics = load_dictionaries([])
    assert dictionary.entries == {}
    assert diagnostics == []


def test_load_dictionaries_conflict_resolved_by_priority(tmp_path):
    f1 = tmp_path / "a.tsv"
    f1.write_text("Blue Moon\tartist\n", encoding="utf-8")
    f2 = tmp_path / "b.tsv"
    f2.write_text("Blue Moon\tsong\n", encoding="utf-8")
    dictionary, diagnostics = load_dictionaries([f1, f2], type_priority=("song", "artist"))
    assert dictionary.entries == {"Blue Moon": "song"}
    assert len(diagnostics) == 1
    assert "kept 'song'" in diagnostics[0].reason


def test_load_dictionaries_malformed_line(tmp_path):
    f = tmp_path / "broken.tsv"
    f.write_text("just a surface with no tab\nJay Chou\tartist\n", encoding="utf-8")
    dictionary, diagnostics = load_dictionaries([f])
    assert dictionary.entries == {"Jay Chou": "artist"}
    assert len(diagnostics) == 1
    assert diagnostics[0].severity == "error"


def test_extract_paper_example():
    spans = extract_entities(PAPER_QUERY, paper_dictionary())
    assert [(s.surface, s.type_tag) for s in spans] == [
        ("Jay Chou", "artist"),
        ("Fragrance of Rice", "song"),
    ]
    assert spans[0].start == 5 and spans[0].end == 13


def test_extract_no_matches():
    assert extract_entities("hello world", paper_dictionary()) == []


def test_extract_longest_match_wins():
    # brute force over this fixture: candidates at position 0 are "AB" and
    # "ABC"; the longest-match rule keeps only "ABC" -> artist
    dictionary = EntityDictionary(entries={"AB": "song", "ABC": "artist"}, type_priority=("song", "artist"))
    brute = [
        (surface, tag)
        for surface, tag in dictionary.entries.items()
        if "ABC".startswith(surface)
    ]
    assert sorted(brute) == [("AB", "song"), ("ABC", "artist")]
    spans = extract_entities("ABC", dictionary)
    assert [(s.surface, s.type_tag) for s in spans] == [("ABC", "artist")]


def test_extract_consumes_matched_region():
    dictionary = EntityDictionary(entries={"aaa": "song", "aa": "artist"}, type_priority=("song", "artist"))
    spans = extract_entities("aaaaa", dictionary)
    assert [(s.surface, s.start) for s in spans] == [("aaa", 0), ("aa", 3)]


def test_templatize_paper_example():
    spans = extract_entities(PAPER_QUERY, paper_dictionary())
    template = templatize(PAPER_QUERY, spans)
    assert template.pattern == "play <artist>'s <song>"
    assert template.slots == ("artist", "song")


def test_templatize_no_spans():
    template = templatize("hello world", [])
    assert template.pattern == "hello world"
    assert template.slots == ()


def test_same_pattern_for_same_entity_types():
    d = paper_dictionary()
    a = template_for("play Listen to Mom", d)
    b = template_for("play Fragrance of Rice", d)
    assert a.pattern == b.pattern == "play <song>"


def test_templatize_rejects_overlapping_spans():
    spans = [
        EntitySpan(0, 4, "play", "song"),
        EntitySpan(2, 6, "ay J", "artist"),
    ]
    with pytest.raises(InvalidInputError):
        templatize("play Jay Chou", spans)


def test_templatize_rejects_bad_surface():
    with pytest.raises(InvalidInputError):
        templatize("play jazz", [EntitySpan(0, 4, "stop", "song")])


def test_fill_template_round_trip_on_paper_example():
    spans = extract_entities(PAPER_QUERY, paper_dictionary())
    template = templatize(PAPER_QUERY, spans)
    assert fill_template(template, [s.surface for s in spans]) == PAPER_QUERY


words = st.text(alphabet="abcde ", min_size=1, max_size=8).map(lambda s: s.strip() or "a")
tags = st.sampled_from(["song", "artist", "genre"])


@given(
    entries=st.dictionaries(words, tags, min_size=0, max_size=6),
    query=st.text(alphabet="abcdefgh ", min_size=1, max_size=60),
)
def test_round_trip_property(entries, query):
    dictionary = EntityDictionary(entries=entries, type_priority=("song", "artist", "genre"))
    spans = extract_entities(query, dictionary)
    prev_end = 0
    for span in spans:
        assert prev_end <= span.start < span.end <= len(query)
        assert query[span.start : span.end] == span.surface
        prev_end = span.end
    template = templatize(query, spans)
    assert len(template.slots) == len(spans)
    assert fill_template(template, [s.surface for s in spans]) == query
