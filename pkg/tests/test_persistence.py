import json

import pytest

from relsum.config import RunConfig
from relsum.services.persistence import (
    TrainingLog,
    artifact_header,
    check_header,
    file_checksum,
    load_corpus,
    read_jsonl,
    save_corpus,
    write_json,
    write_jsonl,
)
from relsum.errors import ConfigMismatchError, CorpusError, MissingArtifactError


def test_malformed_line_reports_its_line_number(tmp_path):
    path = tmp_path / "rows.jsonl"
    path.write_text('{"format_version": 1}\n{"a": 1}\n{"a": \n', encoding="utf-8")

    with pytest.raises(CorpusError) as excinfo:
        read_jsonl(path)

    assert excinfo.value.line == 3
    assert excinfo.value.path == str(path)


def test_truncated_final_record_is_rejected(tmp_path):
    path = tmp_path / "rows.jsonl"
    write_jsonl(path, {"format_version": 1}, [{"a": 1}, {"a": 2}])
    path.write_text(path.read_text(encoding="utf-8").rstrip("\n"), encoding="utf-8")

    with pytest.raises(CorpusError) as excinfo:
        read_jsonl(path)

    assert excinfo.value.line == 3


def test_file_without_header_is_rejected(tmp_path):
    path = tmp_path / "rows.jsonl"
    path.write_text('{"a": 1}\n', encoding="utf-8")

    with pytest.raises(CorpusError):
        read_jsonl(path)
    with pytest.raises(MissingArtifactError):
        read_jsonl(tmp_path / "absent.jsonl")


def test_header_mismatch_needs_explicit_override(tmp_path):
    produced = RunConfig(root_seed=1)
    current = RunConfig(root_seed=2)
    header = artifact_header("corpus", produced)

    check_header(header, produced, tmp_path)
    with pytest.raises(ConfigMismatchError):
        check_header(header, current, tmp_path)
    check_header(header, current, tmp_path, allow_mismatch=True)


def test_corpus_files_reload_to_the_same_world(tiny_corpus, tmp_path):
    header = artifact_header("corpus", RunConfig())

    paths = save_corpus(tmp_path, tiny_corpus, header)
    loaded, loaded_header = load_corpus(tmp_path)

    assert [p.name for p in paths] == ["products.jsonl", "queries.jsonl", "pairs.jsonl"]
    assert loaded.vocab == tiny_corpus.vocab
    assert loaded.products == tiny_corpus.products
    assert loaded.queries == tiny_corpus.queries
    assert loaded.pairs == tiny_corpus.pairs
    assert loaded_header["config_hash"] == header["config_hash"]


def test_json_output_is_canonical(tmp_path):
    first, second = tmp_path / "a.json", tmp_path / "b.json"

    write_json(first, {"b": 1, "a": [1, 2]})
    write_json(second, {"a": [1, 2], "b": 1})

    assert first.read_bytes() == second.read_bytes()
    assert file_checksum(first) == file_checksum(second)


def test_training_log_writes_header_then_steps(tmp_path):
    path = tmp_path / "log.jsonl"

    with TrainingLog(path, {"format_version": 1, "method": "grpo"}) as log:
        log.append({"step": 0, "loss": 0.5})
        log.append({"step": 1, "loss": 0.4})

    lines = [json.loads(line) for line in path.read_text(encoding="utf-8").splitlines()]
    assert lines[0]["method"] == "grpo"
    assert [line["step"] for line in lines[1:]] == [0, 1]
    assert log.records == lines[1:]
