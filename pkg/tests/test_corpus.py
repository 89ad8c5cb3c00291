import json
import re

import pytest
from hypothesis import given, strategies as st

from tibetlm.corpus import (
    CleanDocument, CorpusCleaner, CorpusDecodeError, RawDocument, clean_document, corpus_stats,
    read_clean_documents, read_raw_documents, split_sentences, write_clean_documents,
)
from tibetlm.segmenter import count_syllables

SYLLABLES = ["ཀ", "ཁ", "གི", "ངོ", "བོད", "ཡིག", "སྐད", "ལོ"]


def tibetan_text(n, offset=0):
    return "་".join(SYLLABLES[(i + offset) % len(SYLLABLES)] for i in range(n))


def tsheg_count(text):
    # independent count: every maximal run between tsheg/shad/space is a syllable
    return len([s for s in re.split("[་།༎\\s]+", text) if s])


def test_threshold_boundary():
    assert clean_document(RawDocument("d", tibetan_text(99)), min_syllables=100) is None
    assert clean_document(RawDocument("d", tibetan_text(100)), min_syllables=100) is None
    assert clean_document(RawDocument("d", tibetan_text(101)), min_syllables=100).syllable_count == 101


def test_urls_and_symbols_only_is_dropped():
    doc = RawDocument("u", "http://example.com/2021/a.png www.x.org <b>★☆</b> ©®", None)
    assert clean_document(doc, min_syllables=1) is None


def test_markup_is_stripped_and_syllables_counted():
    body = tibetan_text(150)
    parts = body.split("་")
    text = ("་".join(parts[:40]) + ' <img src="http://img.example/pic_01.jpg" alt="photo 2020"/> '
            + "་".join(parts[40:90]) + "། [image: caption.png] " + "་".join(parts[90:]) + "།")
    clean = clean_document(RawDocument("m", text), min_syllables=100)
    assert clean.syllable_count == tsheg_count(body) == 150
    joined = "".join(clean.sentences)
    assert "img" not in joined and "jpg" not in joined and "2020" not in joined


def test_decode_error_reports_byte_offset():
    data = "ཀ་ཁ".encode() + b"\xff" + "ག".encode()
    with pytest.raises(CorpusDecodeError) as err:
        clean_document(RawDocument("bad", data))
    assert err.value.offset == len("ཀ་ཁ".encode())


def test_lone_surrogate_reports_offset():
    with pytest.raises(CorpusDecodeError) as err:
        clean_document(RawDocument("s", "ཀ\ud800"))
    assert err.value.offset == 3


def test_clean_is_idempotent():
    text = "ཀ་ཁ། ག་ང  abc\n\n" + tibetan_text(120) + "༎ 12 ཅ"
    first = clean_document(RawDocument("i", text))
    again = clean_document(RawDocument("i", "\n".join(first.sentences)))
    assert again.sentences == first.sentences


def test_split_examples():
    assert split_sentences("ཀ་ཁ། ག་ང།") == ["ཀ་ཁ", "ག་ང"]
    assert split_sentences("") == []


def brute_split(text):
    out, cur = [], ""
    for ch in text:
        if ch in "།༎\n":
            out.append(cur)
            cur = ""
        else:
            cur += ch
    out.append(cur)
    return [s.strip() for s in out if s.strip()]


def test_three_shads_without_trailing_gives_four():
    text = "ཀ་ཁ།ག་ང།ཅ་ཆ།ཇ་ཉ"
    assert split_sentences(text) == brute_split(text)
    assert len(split_sentences(text)) == 4


TEXT = st.text(alphabet="ཀཁགང་།༎ \n12", max_size=60)


@given(TEXT)
def test_split_properties(text):
    parts = split_sentences(text)
    assert parts == brute_split(text)
    assert all("།" not in p and "༎" not in p and p for p in parts)
    assert sum(count_syllables(p) for p in parts) == count_syllables(text)
    strip = lambda s: sorted(ch for ch in s if ch not in "།༎ \n")
    assert strip("".join(parts)) == strip(text)


def test_stats():
    empty = corpus_stats([])
    assert (empty.num_documents, empty.num_sentences, empty.num_syllables, empty.num_unique_characters) == (0, 0, 0, 0)
    one = corpus_stats([CleanDocument("a", ("ཀ་ཁ",), 2)])
    assert one.num_syllables == 2 and one.num_unique_characters == 3
    doc = clean_document(RawDocument("x", tibetan_text(130) + "། " + tibetan_text(20, 3)))
    single = corpus_stats([doc])
    ten = corpus_stats([doc] * 10)
    assert ten.num_documents == 10 * single.num_documents
    assert ten.num_sentences == 10 * single.num_sentences
    assert ten.num_syllables == 10 * single.num_syllables
    assert ten.character_histogram == {c: 10 * n for c, n in single.character_histogram.items()}
    assert sum(single.character_histogram.values()) == sum(len(s) for s in doc.sentences)
    merged = corpus_stats([doc]) + corpus_stats([doc] * 9)
    assert merged.to_json() == ten.to_json()


def test_io_round_trip(tmp_path):
    raw = tmp_path / "raw.jsonl"
    raw.write_text("\n".join(json.dumps({"source_id": f"d{i}", "text": tibetan_text(120, i), "category": "c"},
                                        ensure_ascii=False) for i in range(3)), encoding="utf-8")
    docs = read_raw_documents(raw)
    assert [d.source_id for d in docs] == ["d0", "d1", "d2"]
    clean = CorpusCleaner().fit_transform(docs)
    write_clean_documents(clean, tmp_path / "clean.jsonl")
    assert read_clean_documents(tmp_path / "clean.jsonl") == clean
    (tmp_path / "plain.txt").write_text(tibetan_text(110), encoding="utf-8")
    assert read_raw_documents(tmp_path / "plain.txt")[0].source_id == "plain"


def test_duplicate_source_ids_rejected(tmp_path):
    raw = tmp_path / "raw.jsonl"
    raw.write_text('{"source_id": "a", "text": "x"}\n{"source_id": "a", "text": "y"}\n')
    with pytest.raises(ValueError, match="duplicate"):
        read_raw_documents(raw)
