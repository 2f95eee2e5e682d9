"""Exporter checks against a tiny locally constructed masked-LM (no
network): adaptation, determinism, and the export/load round trip through
the completion engine's embedding reader."""

import logging
import os

import numpy as np
import pytest
import torch

from embed_export import (ExportJob, ModelUnavailable, encode_phrases,
                          finetune_mlm, load_model, mlm_loss,
                          write_embedding_file)
from embed_export.cli import main

os.environ.setdefault("HF_HUB_OFFLINE", "1")

PHRASES = ["cat", "dog", "small dog", "tooth decay", "prevent tooth decay",
           "go to the dentist", "cat", "animal with a tail"]


@pytest.fixture(scope="module")
def tiny_model_dir(tmp_path_factory):
    """A randomly initialized two-layer BERT with a character-level
    wordpiece vocabulary, saved locally."""
    from transformers import BertConfig, BertForMaskedLM, BertTokenizerFast

    target = tmp_path_factory.mktemp("tiny-bert")
    vocab = (["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"]
             + list("abcdefghijklmnopqrstuvwxyz")
             + ["##" + c for c in "abcdefghijklmnopqrstuvwxyz"])
    (target / "vocab.txt").write_text("\n".join(vocab) + "\n")
    tokenizer = BertTokenizerFast(vocab_file=str(target / "vocab.txt"),
                                  do_lower_case=True)
    torch.manual_seed(0)
    config = BertConfig(vocab_size=len(vocab), hidden_size=32,
                        num_hidden_layers=2, num_attention_heads=2,
                        intermediate_size=64, max_position_embeddings=64)
    model = BertForMaskedLM(config)
    tokenizer.save_pretrained(target)
    model.save_pretrained(target)
    return str(target)


def job_for(tiny_model_dir, out, **overrides):
    base = dict(model=tiny_model_dir, output=str(out), epochs=3, lr=1e-3,
                batch_size=4, seed=0)
    base.update(overrides)
    return ExportJob(**base)


def test_no_finetune_cli_produces_valid_file(tiny_model_dir, tmp_path):
    phrase_file = tmp_path / "phrases.txt"
    phrase_file.write_text("".join(p + "\n" for p in PHRASES))
    out = tmp_path / "emb.bin"
    assert main(["--phrases", str(phrase_file), "--out", str(out),
                 "--model", tiny_model_dir, "--no-finetune"]) == 0
    assert out.exists() and (tmp_path / "emb.bin.phrases").exists()
    payload = out.read_bytes()
    assert payload[:4] == b"KGE1"
    count = int.from_bytes(payload[4:8], "little")
    dim = int.from_bytes(payload[8:12], "little")
    assert count == len(PHRASES)
    assert len(payload) == 12 + 4 * count * dim


def test_adaptation_reduces_corpus_loss(tiny_model_dir, tmp_path):
    corpus = PHRASES * 8
    job = job_for(tiny_model_dir, tmp_path / "x.bin", epochs=3)
    tokenizer, model = load_model(tiny_model_dir)
    before = mlm_loss(corpus, job, tokenizer, model)
    finetune_mlm(corpus, job, tokenizer, model)
    after = mlm_loss(corpus, job, tokenizer, model)
    assert after <= before, (before, after)


def test_identical_seed_identical_weights(tiny_model_dir, tmp_path):
    states = []
    for _ in range(2):
        job = job_for(tiny_model_dir, tmp_path / "y.bin", epochs=2, seed=11)
        tokenizer, model = load_model(tiny_model_dir)
        finetune_mlm(PHRASES, job, tokenizer, model)
        states.append({k: v.clone() for k, v in model.state_dict().items()})
    for key in states[0]:
        assert torch.equal(states[0][key], states[1][key]), key


def test_duplicate_phrases_get_identical_rows(tiny_model_dir, tmp_path):
    job = job_for(tiny_model_dir, tmp_path / "z.bin")
    tokenizer, model = load_model(tiny_model_dir)
    vectors = encode_phrases(tokenizer, model, PHRASES, job)
    assert vectors.shape[0] == len(PHRASES)
    first, second = PHRASES.index("cat"), 6  # "cat" appears twice
    np.testing.assert_array_equal(vectors[first], vectors[second])


def test_row_order_matches_phrase_order(tiny_model_dir, tmp_path):
    job = job_for(tiny_model_dir, tmp_path / "o.bin")
    tokenizer, model = load_model(tiny_model_dir)
    vectors = encode_phrases(tokenizer, model, PHRASES, job)
    shuffled = list(reversed(PHRASES))
    rev = encode_phrases(tokenizer, model, shuffled, job)
    np.testing.assert_allclose(rev, vectors[::-1], atol=1e-5)


def test_round_trip_through_completion_engine(tiny_model_dir, tmp_path):
    """Acceptance: the exported file loads with zero vocabulary
    mismatches and unit self-cosine."""
    kgc = pytest.importorskip("kgc")
    phrases = ["cat", "dog", "tooth decay", "dentist"]
    graph = kgc.KnowledgeGraph(
        phrases, ["related to"],
        {"train": [[0, 0, 1], [1, 0, 2], [2, 0, 3]]})

    job = job_for(tiny_model_dir, tmp_path / "rt.bin", finetune=False)
    tokenizer, model = load_model(tiny_model_dir)
    vectors = encode_phrases(tokenizer, model, phrases, job)
    write_embedding_file(job.output, vectors, phrases)

    table = kgc.load_embeddings(job.output, graph)
    assert table.num_rows == len(phrases)
    np.testing.assert_array_equal(table.vectors,
                                  vectors.astype(np.float32))
    for row in table.vectors.astype(np.float64):
        cosine = row @ row / (np.linalg.norm(row) * np.linalg.norm(row))
        assert cosine == pytest.approx(1.0, abs=1e-9)


def test_truncation_counted(tiny_model_dir, tmp_path, caplog):
    job = job_for(tiny_model_dir, tmp_path / "t.bin", max_seq_len=4)
    tokenizer, model = load_model(tiny_model_dir)
    with caplog.at_level(logging.WARNING, logger="embed_export.exporter"):
        vectors = encode_phrases(
            tokenizer, model, ["a", "prevent tooth decay forever"], job)
    assert vectors.shape[0] == 2
    assert any("truncated" in r.message for r in caplog.records)


def test_missing_model_gives_actionable_error(tmp_path):
    with pytest.raises(ModelUnavailable, match="Download it first"):
        load_model(str(tmp_path / "no-such-model"))


def test_empty_phrase_list_rejected(tiny_model_dir, tmp_path):
    from embed_export import run_export
    with pytest.raises(ValueError, match="empty"):
        run_export([], job_for(tiny_model_dir, tmp_path / "e.bin"))
