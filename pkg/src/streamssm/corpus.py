"""Data ingestion: tokenizers, fixed-length packing, batching, token caches.

Two tokenizers are provided: a byte-level BPE loaded from standard GPT-2
format files (vocab JSON + merges text), and a dependency-free byte fallback
(256 byte values + eos) used by the smoke corpus and tests. Both are
lossless: decode(encode(s)) == s for any valid UTF-8 string.
"""

from __future__ import annotations

import functools
import json
import struct
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Iterator

import numpy as np
import regex

from .errors import ConfigError, DataError

# GPT-2 pre-tokenization pattern: contractions, letter runs, digit runs,
# punctuation runs (each with optional leading space), then whitespace.
_PRETOKEN_RE = regex.compile(
    r"""'s|'t|'re|'ve|'m|'ll|'d| ?\p{L}+| ?\p{N}+| ?[^\s\p{L}\p{N}]+|\s+(?!\S)|\s+"""
)

BYTE_EOS_ID = 256


@functools.lru_cache(maxsize=1)
def bytes_to_unicode() -> dict[int, str]:
    """GPT-2's reversible byte -> printable-unicode alphabet."""
    bs = list(range(ord("!"), ord("~") + 1)) + list(range(ord("¡"), ord("¬") + 1)) + \
        list(range(ord("®"), ord("ÿ") + 1))
    cs = bs[:]
    extra = 0
    for b in range(256):
        if b not in bs:
            bs.append(b)
            cs.append(256 + extra)
            extra += 1
    return dict(zip(bs, (chr(c) for c in cs)))


class Tokenizer:
    """Byte-level BPE with GPT-2 semantics.

    ``merges`` maps a (left, right) token-string pair to its priority rank;
    lower rank merges first. EOS doubles as the pad token when the vocabulary
    has no explicit pad entry.
    """

    def __init__(self, vocab: dict[str, int], merges: dict[tuple[str, str], int],
                 eos_token: str = "<|endoftext|>"):
        self.vocab = vocab
        self.merges = merges
        self.decoder = {i: tok for tok, i in vocab.items()}
        if len(self.decoder) != len(vocab):
            raise DataError("vocabulary maps two token strings to one id")
        byte_map = bytes_to_unicode()
        self.byte_encoder = byte_map
        self.byte_decoder = {c: b for b, c in byte_map.items()}
        if eos_token in vocab:
            self.eos_id = vocab[eos_token]
        else:
            self.eos_id = max(vocab.values())
        self.pad_id = self.eos_id
        self._cache: dict[str, list[str]] = {}

    @property
    def vocab_size(self) -> int:
        return max(self.vocab.values()) + 1

    def _bpe(self, token: str) -> list[str]:
        cached = self._cache.get(token)
        if cached is not None:
            return cached
        word = list(token)
        while len(word) > 1:
            pairs = {(word[i], word[i + 1]) for i in range(len(word) - 1)}
            best = min(pairs, key=lambda p: self.merges.get(p, float("inf")))
            if best not in self.merges:
                break
            first, second = best
            merged: list[str] = []
            i = 0
            while i < len(word):
                if i < len(word) - 1 and word[i] == first and word[i + 1] == second:
                    merged.append(first + second)
                    i += 2
                else:
                    merged.append(word[i])
                    i += 1
            word = merged
        self._cache[token] = word
        return word

    def encode(self, text: str) -> list[int]:
        ids: list[int] = []
        for chunk in _PRETOKEN_RE.findall(text):
            mapped = "".join(self.byte_encoder[b] for b in chunk.encode("utf-8"))
            for piece in self._bpe(mapped):
                try:
                    ids.append(self.vocab[piece])
                except KeyError:
                    raise DataError(f"token piece {piece!r} missing from vocabulary") from None
        return ids

    def decode(self, ids) -> str:
        text = "".join(self.decoder[int(i)] for i in ids)
        raw = bytes(self.byte_decoder[c] for c in text)
        return raw.decode("utf-8", errors="replace")


class ByteTokenizer:
    """Fallback tokenizer: raw bytes plus one eos id. V = 257."""

    def __init__(self):
        self.eos_id = BYTE_EOS_ID
        self.pad_id = BYTE_EOS_ID

    @property
    def vocab_size(self) -> int:
        return 257

    def encode(self, text: str) -> list[int]:
        return list(text.encode("utf-8"))

    def decode(self, ids) -> str:
        return bytes(i for i in ids if i != BYTE_EOS_ID).decode("utf-8", errors="replace")


def load_bpe(vocab_file, merges_file) -> Tokenizer:
    """Load a GPT-2 format tokenizer: vocab JSON + one merge pair per line."""
    try:
        with open(vocab_file, encoding="utf-8") as fh:
            vocab = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read vocabulary file {vocab_file}: {exc}") from exc
    if not isinstance(vocab, dict) or not all(
            isinstance(k, str) and isinstance(v, int) for k, v in vocab.items()):
        raise DataError("vocabulary must be a JSON object mapping token strings to ids")

    merges: dict[tuple[str, str], int] = {}
    try:
        with open(merges_file, encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise DataError(f"cannot read merges file {merges_file}: {exc}") from exc
    for line in lines:
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split(" ")
        if len(parts) != 2:
            raise DataError(f"malformed merge rule {line!r}")
        pair = (parts[0], parts[1])
        if pair[0] + pair[1] not in vocab:
            raise DataError(f"merge result {pair[0] + pair[1]!r} missing from vocabulary")
        merges.setdefault(pair, len(merges))
    return Tokenizer(vocab, merges)


def byte_fallback_tokenizer() -> ByteTokenizer:
    return ByteTokenizer()


# -- packing and batching ------------------------------------------------------


@dataclass
class PackedDataset:
    """Contiguous token stream cut into non-overlapping length-T samples.

    Sample i is (tokens[iT : iT+T], tokens[iT+1 : iT+T+1]); the target is the
    input shifted by one. The trailing remainder shorter than T+1 is dropped.
    """

    tokens: np.ndarray
    seq_len: int

    @property
    def num_samples(self) -> int:
        return (len(self.tokens) - 1) // self.seq_len

    def sample(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        start = i * self.seq_len
        return (self.tokens[start:start + self.seq_len],
                self.tokens[start + 1:start + self.seq_len + 1])

    @property
    def token_count(self) -> int:
        return len(self.tokens)


def pack(tokens, seq_len: int) -> PackedDataset:
    tokens = np.asarray(tokens, dtype=np.int32)
    if len(tokens) < seq_len + 1:
        raise DataError(f"need at least {seq_len + 1} tokens to pack, got {len(tokens)}")
    return PackedDataset(tokens=tokens, seq_len=seq_len)


def batches(ds: PackedDataset, batch_size: int, shuffle: bool = False,
            seed: int = 0, drop_last: bool | None = None
            ) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield (inputs, targets) batches of shape [B, T].

    Order is deterministic given the seed. ``drop_last`` defaults to the
    shuffle flag: training drops the final partial batch, evaluation keeps it.
    """
    if batch_size < 1:
        raise ConfigError(f"batch size must be >= 1, got {batch_size}")
    if ds.num_samples == 0:
        raise DataError("dataset has no full samples")
    if drop_last is None:
        drop_last = shuffle
    order = np.arange(ds.num_samples)
    if shuffle:
        order = np.random.default_rng(seed).permutation(ds.num_samples)
    limit = (ds.num_samples // batch_size) * batch_size if drop_last else ds.num_samples
    for start in range(0, limit, batch_size):
        chunk = order[start:start + batch_size]
        xs = np.stack([ds.sample(i)[0] for i in chunk])
        ys = np.stack([ds.sample(i)[1] for i in chunk])
        yield xs, ys


def num_batches(ds: PackedDataset, batch_size: int, drop_last: bool) -> int:
    if drop_last:
        return ds.num_samples // batch_size
    return -(-ds.num_samples // batch_size)


# -- token cache files ---------------------------------------------------------

_CACHE_MAGIC = b"SSTK"
_CACHE_VERSION = 1


def save_tokens(path, ids: np.ndarray, vocab_size: int) -> None:
    """Write a token cache: magic, version, V, count, little-endian int32 ids."""
    ids = np.asarray(ids, dtype="<i4")
    with open(path, "wb") as fh:
        fh.write(_CACHE_MAGIC)
        fh.write(struct.pack("<IIQ", _CACHE_VERSION, vocab_size, len(ids)))
        fh.write(ids.tobytes())


def load_tokens(path) -> tuple[np.ndarray, int]:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _CACHE_MAGIC:
            raise DataError(f"{path} is not a token cache file")
        version, vocab_size, count = struct.unpack("<IIQ", fh.read(16))
        if version != _CACHE_VERSION:
            raise DataError(f"unsupported token cache version {version}")
        ids = np.frombuffer(fh.read(count * 4), dtype="<i4")
        if len(ids) != count:
            raise DataError(f"token cache {path} is truncated")
    return ids.astype(np.int32), vocab_size


# -- split loading --------------------------------------------------------------


@dataclass
class DataConfig:
    train_path: str = ""
    val_path: str = ""
    tokenizer: str = "byte"   # "byte" or "bpe"
    vocab_file: str = ""
    merges_file: str = ""

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "DataConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


def build_tokenizer(dc: DataConfig):
    if dc.tokenizer == "byte":
        return byte_fallback_tokenizer()
    if dc.tokenizer == "bpe":
        if not dc.vocab_file or not dc.merges_file:
            raise ConfigError("bpe tokenizer requires vocab_file and merges_file")
        return load_bpe(dc.vocab_file, dc.merges_file)
    raise ConfigError(f"unknown tokenizer {dc.tokenizer!r}")


def tokenize_split(path, tokenizer) -> np.ndarray:
    """Encode one raw-text split into a contiguous id stream ending in eos."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read split file {path}: {exc}") from exc
    ids = tokenizer.encode(text)
    ids.append(tokenizer.eos_id)
    return np.asarray(ids, dtype=np.int32)
