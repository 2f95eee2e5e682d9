"""Adapt a pre-trained masked language model to a knowledge graph's node
phrases and export one embedding row per phrase.

The export file is the binary table the completion engine consumes:
magic ``KGE1``, u32 row count, u32 dimension, row-major little-endian
float32 rows, plus a phrase sidecar (``<out>.phrases``, one phrase per
line in row order). Row order always matches the input phrase order.

Each phrase is encoded as ``[CLS] phrase [SEP]`` and represented by the
last layer's [CLS] state. Adaptation runs the masked-LM objective over
the phrase list itself (max sequence length 64, batch size 32, learning
rate 3e-5, warmup proportion 0.1).
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch.utils.data import DataLoader

log = logging.getLogger(__name__)

EMBED_MAGIC = b"KGE1"
DEFAULT_MODEL = "bert-large-uncased"


class ModelUnavailable(RuntimeError):
    pass


@dataclass
class ExportJob:
    model: str = DEFAULT_MODEL
    output: str = "embeddings.bin"
    max_seq_len: int = 64
    batch_size: int = 32
    lr: float = 3e-5
    warmup_proportion: float = 0.1
    epochs: int = 1
    mask_probability: float = 0.15
    seed: int = 0
    finetune: bool = True


def load_model(name_or_path):
    """Tokenizer and masked-LM head; local paths work offline."""
    from transformers import AutoModelForMaskedLM, AutoTokenizer

    try:
        tokenizer = AutoTokenizer.from_pretrained(name_or_path)
        model = AutoModelForMaskedLM.from_pretrained(name_or_path)
    except (OSError, EnvironmentError, ValueError) as exc:
        raise ModelUnavailable(
            f"could not load {name_or_path!r}: {exc}\n"
            f"Download it first (`hf download {name_or_path}`) or pass a "
            "local checkpoint directory via --model.") from exc
    model.eval()
    return tokenizer, model


def _encode_batches(tokenizer, phrases, max_seq_len, batch_size):
    truncated = 0
    for lo in range(0, len(phrases), batch_size):
        chunk = phrases[lo:lo + batch_size]
        full = tokenizer(chunk, add_special_tokens=True)["input_ids"]
        truncated += sum(len(ids) > max_seq_len for ids in full)
        yield tokenizer(chunk, padding=True, truncation=True,
                        max_length=max_seq_len, return_tensors="pt")
    if truncated:
        log.warning("%d phrase(s) exceeded %d tokens and were truncated",
                    truncated, max_seq_len)


def finetune_mlm(phrases, job: ExportJob, tokenizer=None, model=None):
    """Adapt the model on the phrase corpus with the masked-LM objective.

    Deterministic for a fixed job seed. Returns the adapted model (the
    instance is modified in place when one is passed in).
    """
    from transformers import DataCollatorForLanguageModeling
    from transformers.optimization import get_linear_schedule_with_warmup

    if not phrases:
        raise ValueError("phrase list is empty")
    if tokenizer is None or model is None:
        tokenizer, model = load_model(job.model)
    torch.manual_seed(job.seed)

    encodings = tokenizer(list(phrases), truncation=True,
                          max_length=job.max_seq_len)["input_ids"]
    collator = DataCollatorForLanguageModeling(
        tokenizer=tokenizer, mlm_probability=job.mask_probability)
    loader = DataLoader(
        [{"input_ids": ids} for ids in encodings],
        batch_size=job.batch_size, shuffle=True, collate_fn=collator,
        generator=torch.Generator().manual_seed(job.seed))

    steps = max(1, len(loader) * job.epochs)
    optimizer = torch.optim.AdamW(model.parameters(), lr=job.lr)
    scheduler = get_linear_schedule_with_warmup(
        optimizer, int(job.warmup_proportion * steps), steps)

    model.train()
    for epoch in range(job.epochs):
        for batch in loader:
            if not (batch["labels"] != -100).any():
                continue  # the collator masked nothing in this batch
            out = model(input_ids=batch["input_ids"],
                        attention_mask=batch.get("attention_mask"),
                        labels=batch["labels"])
            optimizer.zero_grad()
            out.loss.backward()
            optimizer.step()
            scheduler.step()
        log.info("adaptation epoch %d/%d done", epoch + 1, job.epochs)
    model.eval()
    return model


def mlm_loss(phrases, job, tokenizer, model):
    """Mean masked-LM loss over the corpus with a job-seeded fixed mask
    (for before/after comparisons)."""
    from transformers import DataCollatorForLanguageModeling

    torch.manual_seed(job.seed + 1)
    encodings = tokenizer(list(phrases), truncation=True,
                          max_length=job.max_seq_len)["input_ids"]
    collator = DataCollatorForLanguageModeling(
        tokenizer=tokenizer, mlm_probability=job.mask_probability)
    loader = DataLoader([{"input_ids": ids} for ids in encodings],
                        batch_size=job.batch_size, shuffle=False,
                        collate_fn=collator)
    total, count = 0.0, 0
    model.eval()
    with torch.no_grad():
        for batch in loader:
            masked = int((batch["labels"] != -100).sum())
            if not masked:
                continue
            out = model(input_ids=batch["input_ids"],
                        attention_mask=batch.get("attention_mask"),
                        labels=batch["labels"])
            total += float(out.loss) * masked
            count += masked
    return total / max(count, 1)


def encode_phrases(tokenizer, model, phrases, job: ExportJob):
    """[CLS] last-layer states, one float32 row per phrase, input order."""
    rows = []
    model.eval()
    with torch.no_grad():
        for batch in _encode_batches(tokenizer, list(phrases),
                                     job.max_seq_len, job.batch_size):
            states = model.base_model(
                input_ids=batch["input_ids"],
                attention_mask=batch["attention_mask"]).last_hidden_state
            rows.append(states[:, 0, :].to(torch.float32).numpy())
    return np.concatenate(rows, axis=0)


def write_embedding_file(path, vectors, phrases, phrases_path=None):
    """Binary table plus the phrase sidecar, bit-exact at float32."""
    vectors = np.ascontiguousarray(vectors, dtype="<f4")
    if vectors.shape[0] != len(phrases):
        raise ValueError(f"{vectors.shape[0]} rows for {len(phrases)} phrases")
    with open(path, "wb") as fh:
        fh.write(EMBED_MAGIC)
        fh.write(struct.pack("<II", vectors.shape[0], vectors.shape[1]))
        fh.write(vectors.tobytes())
    sidecar = Path(phrases_path) if phrases_path else Path(str(path) + ".phrases")
    sidecar.write_text("".join(p + "\n" for p in phrases), encoding="utf-8")


def run_export(phrases, job: ExportJob):
    """Full pipeline: load, optionally adapt, encode, write."""
    if not phrases:
        raise ValueError("phrase list is empty")
    tokenizer, model = load_model(job.model)
    if job.finetune:
        finetune_mlm(phrases, job, tokenizer, model)
    vectors = encode_phrases(tokenizer, model, phrases, job)
    write_embedding_file(job.output, vectors, phrases)
    log.info("wrote %d x %d embeddings to %s", vectors.shape[0],
             vectors.shape[1], job.output)
    return vectors
