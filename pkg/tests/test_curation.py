import shutil

import pytest
from PIL import Image

from conftest import write_png
from xens.curation import (
    ExclusionEntry,
    ImageCollection,
    ImageRecord,
    SourceSpec,
    apply_exclusions,
    compose_dataset,
    deduplicate,
    exclusion_digest,
    ingest_sources,
    load_exclusion_list,
    read_collection,
    read_manifest,
    write_collection,
    write_manifest,
)
from xens.errors import DataError


def _specs(dirs):
    return [SourceSpec(d, label, f"s{i}") for i, (label, d) in enumerate(dirs.items())]


def _record(image_id, label, digest, excluded=False):
    return ImageRecord(image_id, f"/x/{image_id}", image_id.split("/")[0], label, digest, 8, 8, excluded)


def _collection(counts):
    records = []
    for label, n in counts.items():
        records += [_record(f"s/{label}{i:05d}", label, f"{label}-{i}") for i in range(n)]
    return ImageCollection(tuple(records))


def test_source_spec_parse():
    spec = SourceSpec.parse("C:/data/x:covid19:src.2")
    assert str(spec.directory) == "C:/data/x", f"got {spec.directory}"
    assert spec.raw_label == "covid19"
    assert spec.source_id == "src.2"
    with pytest.raises(DataError):
        SourceSpec.parse("no-separators")


def test_ingest_three_dirs(image_dirs):
    collection = ingest_sources(_specs(image_dirs))
    assert len(collection) == 6, f"Expected 6 records, got {len(collection)}"
    assert collection.counts() == {"normal": 2, "pneumonia": 2, "covid19": 2}
    labels = {r.id: r.raw_label for r in collection.records}
    assert labels["s0/x1.png"] == "normal"
    assert labels["s2/x2.png"] == "covid19"


def test_ingest_namespaces_ids_per_source(tmp_path):
    write_png(tmp_path / "a" / "x.png", 1)
    write_png(tmp_path / "b" / "x.png", 2)
    collection = ingest_sources([SourceSpec(tmp_path / "a", "normal", "srcA"),
                                 SourceSpec(tmp_path / "b", "normal", "srcB")])
    assert collection.ids() == ["srcA/x.png", "srcB/x.png"]


def test_ingest_skips_corrupt_file(tmp_path):
    write_png(tmp_path / "n" / "good.png", 1)
    (tmp_path / "n" / "bad.png").write_bytes(b"not an image")
    collection = ingest_sources([SourceSpec(tmp_path / "n", "normal", "s")])
    assert collection.ids() == ["s/good.png"]
    assert len(collection.skipped) == 1 and collection.skipped[0][0].endswith("bad.png")


def test_ingest_skips_oversized_image(tmp_path, monkeypatch):
    write_png(tmp_path / "n" / "big.png", 1, size=32)
    write_png(tmp_path / "n" / "small.png", 2, size=4)
    monkeypatch.setattr(Image, "MAX_IMAGE_PIXELS", 200)
    collection = ingest_sources([SourceSpec(tmp_path / "n", "normal", "s")])
    assert collection.ids() == ["s/small.png"]
    assert collection.skipped[0][1] == "undecodable: DecompressionBombError"


def test_ingest_threaded_matches_sequential(image_dirs):
    assert ingest_sources(_specs(image_dirs), workers=4) == ingest_sources(_specs(image_dirs))


def test_ingest_missing_directory(tmp_path):
    with pytest.raises(DataError, match="not found"):
        ingest_sources([SourceSpec(tmp_path / "nope", "normal", "s")])


def test_ingest_no_decodable_images(tmp_path):
    (tmp_path / "n").mkdir()
    (tmp_path / "n" / "bad.png").write_bytes(b"junk")
    with pytest.raises(DataError, match="no decodable"):
        ingest_sources([SourceSpec(tmp_path / "n", "normal", "s")])


def test_ingest_unknown_label(image_dirs):
    with pytest.raises(DataError, match="unknown raw label"):
        ingest_sources([SourceSpec(image_dirs["normal"], "tuberculosis", "s")])


def test_deduplicate_keeps_smallest_id(tmp_path):
    write_png(tmp_path / "a" / "x.png", 5)
    (tmp_path / "b").mkdir()
    shutil.copy(tmp_path / "a" / "x.png", tmp_path / "b" / "x.png")
    collection = ingest_sources([SourceSpec(tmp_path / "a", "normal", "a"),
                                 SourceSpec(tmp_path / "b", "normal", "b")])
    out, report = deduplicate(collection)
    assert out.ids() == ["a/x.png"], f"got {out.ids()}"
    assert report.duplicates_removed == [("a/x.png", ["b/x.png"])]
    assert report.removed_count == 1


def test_deduplicate_unique_is_identity(image_dirs):
    collection = ingest_sources(_specs(image_dirs))
    out, report = deduplicate(collection)
    assert out == collection
    assert report.duplicates_removed == []


def test_deduplicate_is_idempotent():
    records = [_record(f"s/n{i}", "normal", f"h{i % 3}") for i in range(7)]
    records += [_record(f"t/p{i}", "pneumonia", f"h{i % 2}") for i in range(4)]
    once, first = deduplicate(ImageCollection(tuple(records)))
    assert sorted(r.content_hash for r in once.records) == ["h0", "h1", "h2"]
    twice, second = deduplicate(once)
    assert twice == once
    assert first.removed_count == 8 and second.duplicates_removed == []


def test_apply_exclusions():
    collection = _collection({"normal": 4, "pneumonia": 3, "covid19": 3})
    target = collection.ids()[0]
    out, report = apply_exclusions(collection, [ExclusionEntry(target, "marker")])
    assert len(out.active()) == 9
    assert report.excluded == [(target, "marker")]
    rec = next(r for r in out.records if r.id == target)
    assert rec.excluded and rec.exclusion_reason == "marker"


def test_apply_exclusions_empty_and_stale():
    collection = _collection({"normal": 2, "pneumonia": 2, "covid19": 2})
    out, report = apply_exclusions(collection, [])
    assert out == collection and report.stale_ids == []
    out, report = apply_exclusions(collection, [ExclusionEntry("s/unknown")])
    assert out == collection
    assert report.stale_ids == ["s/unknown"]


def test_exclusion_list_file(tmp_path):
    path = tmp_path / "excl.txt"
    path.write_text("# comment\ns/a\twires\n\ns/b\n", encoding="utf-8")
    entries = load_exclusion_list(path)
    assert entries == [ExclusionEntry("s/a", "wires"), ExclusionEntry("s/b", "artifact")]
    assert exclusion_digest([]) == "none"
    assert exclusion_digest(entries) == exclusion_digest(list(reversed(entries)))


@pytest.mark.parametrize("scheme,expected", [
    ("A", {"normal": 1579, "diseased": 4429}),
    ("B", {"non-pneumonia": 1763, "pneumonia": 4245}),
    ("C", {"non-covid19": 5824, "covid19": 184}),
    ("D", {"normal": 1579, "pneumonia": 4245, "covid19": 184}),
])
def test_compose_counts(scheme, expected):
    collection = _collection({"normal": 1579, "pneumonia": 4245, "covid19": 184})
    manifest = compose_dataset(collection, scheme)
    assert manifest.class_counts == expected, f"scheme {scheme}: got {manifest.class_counts}"
    assert len(manifest.entries) == 6008


def test_compose_skips_excluded():
    collection = _collection({"normal": 3, "pneumonia": 3, "covid19": 3})
    collection, _ = apply_exclusions(collection, [ExclusionEntry(collection.ids()[0])])
    manifest = compose_dataset(collection, "D", "abc")
    assert sum(manifest.class_counts.values()) == 8
    assert len(manifest.excluded) == 1
    assert manifest.provenance.exclusion_digest == "abc"


def test_compose_schemes_relabel_the_same_images():
    collection = _collection({"normal": 7, "pneumonia": 5, "covid19": 4})
    collection, _ = apply_exclusions(collection, [ExclusionEntry(collection.ids()[3])])
    d = {e.image_id: e.label for e in compose_dataset(collection, "D").entries}
    assert set(d) == {r.id for r in collection.active()}
    expected = {
        "A": lambda raw: "normal" if raw == "normal" else "diseased",
        "B": lambda raw: "pneumonia" if raw == "pneumonia" else "non-pneumonia",
        "C": lambda raw: "covid19" if raw == "covid19" else "non-covid19",
    }
    for scheme, relabel in expected.items():
        manifest = compose_dataset(collection, scheme)
        assert manifest.ids() == sorted(d)
        assert {e.image_id: e.label for e in manifest.entries} == {i: relabel(raw) for i, raw in d.items()}
        assert sum(manifest.class_counts.values()) == len(d)


def test_compose_empty_class_is_fatal():
    collection = _collection({"normal": 3, "pneumonia": 3, "covid19": 0})
    with pytest.raises(DataError, match="covid19"):
        compose_dataset(collection, "A")


def test_collection_and_manifest_files(tmp_path, image_dirs):
    collection, report = deduplicate(ingest_sources(_specs(image_dirs)))
    collection, excl = apply_exclusions(collection, [ExclusionEntry(collection.ids()[0], "arrow")])
    write_collection(tmp_path / "c.tsv", collection, [report, excl])
    assert read_collection(tmp_path / "c.tsv") == collection

    manifest = compose_dataset(collection, "B")
    write_manifest(tmp_path / "m.tsv", manifest)
    back = read_manifest(tmp_path / "m.tsv")
    assert back == manifest
    first = (tmp_path / "m.tsv").read_bytes()
    write_manifest(tmp_path / "m.tsv", compose_dataset(collection, "B"))
    assert (tmp_path / "m.tsv").read_bytes() == first, "manifest rewrite is not byte-identical"


def test_collection_file_with_bad_size(tmp_path, image_dirs):
    collection = ingest_sources(_specs(image_dirs))
    write_collection(tmp_path / "c.tsv", collection)
    text = (tmp_path / "c.tsv").read_text(encoding="utf-8")
    (tmp_path / "c.tsv").write_text(text.replace("\t16\t16\t", "\tsixteen\t16\t", 1), encoding="utf-8")
    with pytest.raises(DataError, match="bad image size"):
        read_collection(tmp_path / "c.tsv")
