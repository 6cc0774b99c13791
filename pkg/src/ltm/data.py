"""Byte-level tokenisation, EOS-separated document packing and deterministic batching."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Protocol

import numpy as np

from .container import read_container, write_container

N_BYTES = 256
EOS_ID = 256
BOS_ID = 257
VOCAB_SIZE = 258


class EmptyCorpusError(ValueError):
    pass


class Tokenizer(Protocol):
    vocab_size: int
    eos_id: int
    bos_id: int

    def encode(self, text: bytes) -> np.ndarray: ...

    def decode(self, ids) -> bytes: ...


class ByteTokenizer:
    """Identity map on bytes plus two reserved ids (EOS=256, BOS=257)."""

    vocab_size = VOCAB_SIZE
    eos_id = EOS_ID
    bos_id = BOS_ID

    def __init__(self, eos_glyph: bytes = b"\n"):
        self.eos_glyph = eos_glyph

    def encode(self, text: bytes | str) -> np.ndarray:
        if isinstance(text, str):
            text = text.encode("utf-8")
        return np.frombuffer(text, dtype=np.uint8).astype(np.int64)

    def decode(self, ids) -> bytes:
        out = bytearray()
        for i in np.asarray(ids, dtype=np.int64).ravel():
            if i < N_BYTES:
                out.append(int(i))
            elif i == EOS_ID:
                out += self.eos_glyph
            elif i != BOS_ID:
                raise ValueError(f"token id {i} outside byte vocabulary")
        return bytes(out)


_default = ByteTokenizer()


def tokenize(text: bytes | str) -> np.ndarray:
    return _default.encode(text)


def detokenize(ids, eos_glyph: bytes = b"\n") -> bytes:
    return ByteTokenizer(eos_glyph).decode(ids)


@dataclass(frozen=True)
class PackedDataset:
    rows: np.ndarray            # [n_rows, seq_len] int64
    doc_boundaries: np.ndarray  # stream offset at which each document starts
    stream_len: int

    @property
    def n_rows(self) -> int:
        return self.rows.shape[0]

    @property
    def seq_len(self) -> int:
        return self.rows.shape[1]


def pack_corpus(docs, seq_len: int, tokenizer: Tokenizer = _default) -> PackedDataset:
    """Concatenate ``doc + EOS`` for every document and cut into full rows; the tail is dropped."""
    encoded = [tokenizer.encode(d) for d in docs]
    if not any(len(e) for e in encoded):
        raise EmptyCorpusError("corpus contains no non-empty documents")
    pieces, starts, off = [], [], 0
    for e in encoded:
        starts.append(off)
        pieces.append(e)
        pieces.append(np.array([tokenizer.eos_id], dtype=np.int64))
        off += len(e) + 1
    stream = np.concatenate(pieces)
    n_rows = len(stream) // seq_len
    rows = stream[:n_rows * seq_len].reshape(n_rows, seq_len).copy()
    return PackedDataset(rows, np.array(starts, dtype=np.int64), len(stream))


def batch_order(n_rows: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n_rows)


def batches(ds: PackedDataset, batch_size: int, seed: int, epoch: int) -> Iterator[np.ndarray]:
    """Row-index minibatches of one epoch; order is a pure function of (seed, epoch)."""
    if batch_size < 1 or batch_size > ds.n_rows:
        raise ValueError(f"batch_size {batch_size} not in [1, {ds.n_rows}]")
    order = batch_order(ds.n_rows, seed, epoch)
    for b in range(ds.n_rows // batch_size):
        yield order[b * batch_size:(b + 1) * batch_size]


def split_docs(docs: list, val_fraction: float = 0.1) -> tuple[list, list]:
    """Last ``val_fraction`` of documents (at least one if there are two or more) is held out."""
    n_val = int(len(docs) * val_fraction)
    if n_val == 0 and len(docs) >= 2 and val_fraction > 0:
        n_val = 1
    return docs[:len(docs) - n_val], docs[len(docs) - n_val:]


def load_corpus(path) -> list[bytes]:
    """A directory holds one document per file (sorted by name); a single file
    separates documents with blank lines."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"corpus path does not exist: {path}")
    if path.is_dir():
        return [p.read_bytes() for p in sorted(path.iterdir()) if p.is_file()]
    text = path.read_bytes().replace(b"\r\n", b"\n")
    docs = [d.strip(b"\n") for d in text.split(b"\n\n")]
    return [d for d in docs if d]


def save_rows(path, ds: PackedDataset) -> None:
    write_container(path, {"kind": "ltm-rows", "stream_len": str(ds.stream_len)},
                    {"rows": ds.rows.astype(np.float32), "doc_boundaries": ds.doc_boundaries.astype(np.float32)})


def load_rows(path) -> PackedDataset:
    header, t = read_container(path)
    if header.get("kind") != "ltm-rows":
        raise ValueError(f"{path}: not a dataset cache")
    return PackedDataset(t["rows"].astype(np.int64), t["doc_boundaries"].astype(np.int64),
                         int(header["stream_len"]))


_WORDS = (
    "amber anchor apple arrow autumn badge basket beacon birch blanket bottle bridge bronze button cabin "
    "candle canvas carbon cedar chalk cherry circle clock cloud copper coral cotton crane crystal dagger "
    "desert dragon drum eagle ember engine falcon feather fern fiddle flame forest fossil garden garnet "
    "glacier goblet granite harbor hammer harvest hazel helmet hollow honey island ivory jacket jasmine "
    "kettle lantern lemon linen lizard magnet maple marble meadow mirror mitten needle nickel oasis ocean "
    "olive orchid otter paddle palace pebble pepper pillow planet pocket quartz quill rabbit raven ribbon "
    "river rocket saddle salmon scarf shadow silver sparrow spider spruce stone summer tablet thistle "
    "thunder timber tulip tunnel velvet violet walnut whistle willow window winter wizard yarrow zephyr"
).split()


def synthetic_corpus(n_docs: int = 32, doc_bytes: int = 512, seed: int = 0) -> list[bytes]:
    """Documents of randomly ordered lexicon words, each about ``doc_bytes`` long.

    Word order carries no local regularity, so a decoder can only predict a
    document beyond its spelling by remembering it.
    """
    rng = np.random.default_rng(seed)
    docs = []
    for _ in range(n_docs):
        words: list[str] = []
        n = 0
        while n < doc_bytes:
            w = _WORDS[rng.integers(len(_WORDS))]
            words.append(w)
            n += len(w) + 1
        text = " ".join(words)[:doc_bytes]
        docs.append(text.encode("ascii"))
    return docs
