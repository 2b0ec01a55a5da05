"""Byte-level BPE tokenizer, corpus statistics, and token-count filters.

Token ids 0..255 are raw bytes, each merge adds one id, and a block of
reserved special-token slots sits on top (the production layout is 32,000
base entries plus 128 specials for 32,128 total). Specials are inserted
programmatically (chat templating); plain-text encoding never emits them,
so any UTF-8 string round-trips exactly.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

N_BYTE_TOKENS = 256
DEFAULT_RESERVED_SPECIALS = 128

CHAT_SPECIALS = ["<|system|>", "<|user|>", "<|assistant|>", "<|tool|>", "<|end|>"]


@dataclass
class TokenizerModel:
    """Merge table plus special-token allocation.

    merges: ordered (left id, right id) pairs; rank = list index.
    specials: name -> id, ids in [base_size, base_size + n_reserved).
    """

    merges: list[tuple[int, int]] = field(default_factory=list)
    specials: dict[str, int] = field(default_factory=dict)
    n_reserved: int = DEFAULT_RESERVED_SPECIALS

    def __post_init__(self):
        self._token_bytes: dict[int, bytes] = {i: bytes([i]) for i in range(N_BYTE_TOKENS)}
        for rank, (left, right) in enumerate(self.merges):
            tid = N_BYTE_TOKENS + rank
            if left >= tid or right >= tid:
                raise ValueError(f"merge {rank} references id not yet defined: ({left}, {right})")
            self._token_bytes[tid] = self._token_bytes[left] + self._token_bytes[right]
        self._ranks = {pair: r for r, pair in enumerate(self.merges)}
        if len(self.specials) > self.n_reserved:
            raise ValueError(
                f"{len(self.specials)} specials exceed {self.n_reserved} reserved slots"
            )
        self._special_names = {}
        for name, tid in self.specials.items():
            if not (self.base_size <= tid < self.vocab_size):
                raise ValueError(f"special {name!r} id {tid} outside reserved range")
            if tid in self._special_names:
                raise ValueError(f"special id {tid} allocated twice")
            self._special_names[tid] = name

    @property
    def base_size(self) -> int:
        return N_BYTE_TOKENS + len(self.merges)

    @property
    def vocab_size(self) -> int:
        return self.base_size + self.n_reserved

    def special_id(self, name: str) -> int:
        if name not in self.specials:
            raise KeyError(f"unknown special token {name!r}")
        return self.specials[name]

    def token_to_bytes(self, tid: int) -> bytes:
        return self._token_bytes[tid]

    # -- encode / decode ---------------------------------------------------

    def encode(self, text: str) -> list[int]:
        """Greedy lowest-rank byte-pair merging; never emits special ids."""
        ids = list(text.encode("utf-8"))
        if len(ids) < 2 or not self._ranks:
            return ids
        while True:
            best_rank = None
            for pair in zip(ids, ids[1:]):
                r = self._ranks.get(pair)
                if r is not None and (best_rank is None or r < best_rank):
                    best_rank = r
            if best_rank is None:
                return ids
            left, right = self.merges[best_rank]
            merged_id = N_BYTE_TOKENS + best_rank
            out = []
            i = 0
            while i < len(ids):
                if i + 1 < len(ids) and ids[i] == left and ids[i + 1] == right:
                    out.append(merged_id)
                    i += 2
                else:
                    out.append(ids[i])
                    i += 1
            ids = out

    def decode(self, ids) -> str:
        """Inverse of encode; special ids render as their names.

        Raises on ids outside the vocabulary or in unallocated special slots.
        """
        parts: list[bytes] = []
        for tid in ids:
            tid = int(tid)
            if tid < 0 or tid >= self.vocab_size:
                raise ValueError(f"token id {tid} outside vocabulary of {self.vocab_size}")
            if tid >= self.base_size:
                name = self._special_names.get(tid)
                if name is None:
                    raise ValueError(f"unknown special token id {tid}")
                parts.append(name.encode("utf-8"))
            else:
                parts.append(self._token_bytes[tid])
        return b"".join(parts).decode("utf-8", errors="replace")


def allocate_chat_specials(merges: list[tuple[int, int]], n_reserved: int = DEFAULT_RESERVED_SPECIALS) -> TokenizerModel:
    """Tokenizer with the chat-control specials in the first reserved slots."""
    base = N_BYTE_TOKENS + len(merges)
    specials = {name: base + i for i, name in enumerate(CHAT_SPECIALS)}
    return TokenizerModel(merges=merges, specials=specials, n_reserved=n_reserved)


def train_bpe(texts, n_merges: int) -> list[tuple[int, int]]:
    """Most-frequent-pair BPE over the byte corpus; ties break on pair ids."""
    seqs = [list(t.encode("utf-8")) for t in texts]
    merges: list[tuple[int, int]] = []
    for rank in range(n_merges):
        counts: Counter = Counter()
        for seq in seqs:
            counts.update(zip(seq, seq[1:]))
        if not counts:
            break
        best = min(counts.items(), key=lambda kv: (-kv[1], kv[0]))[0]
        if counts[best] < 2:
            break
        merged_id = N_BYTE_TOKENS + rank
        merges.append(best)
        left, right = best
        next_seqs = []
        for seq in seqs:
            out = []
            i = 0
            while i < len(seq):
                if i + 1 < len(seq) and seq[i] == left and seq[i + 1] == right:
                    out.append(merged_id)
                    i += 2
                else:
                    out.append(seq[i])
                    i += 1
            next_seqs.append(out)
        seqs = next_seqs
    return merges


# -- plain-text model file -------------------------------------------------------


def save_tokenizer(tok: TokenizerModel, path) -> None:
    """Vocabulary (hex), ordered merges, and special table, one item per line."""
    lines = ["forge-tokenizer 1"]
    lines.append(f"vocab {tok.base_size}")
    for tid in range(tok.base_size):
        lines.append(f"{tid} {tok.token_to_bytes(tid).hex()}")
    lines.append(f"merges {len(tok.merges)}")
    for left, right in tok.merges:
        lines.append(f"{left} {right}")
    lines.append(f"specials {len(tok.specials)} reserved {tok.n_reserved}")
    for name, tid in sorted(tok.specials.items(), key=lambda kv: kv[1]):
        lines.append(f"{tid} {name}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_tokenizer(path) -> TokenizerModel:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or not lines[0].startswith("forge-tokenizer "):
        raise ValueError(f"{path}: not a tokenizer model file")
    i = 1
    if not lines[i].startswith("vocab "):
        raise ValueError(f"{path}: missing vocab section")
    n_vocab = int(lines[i].split()[1])
    vocab: dict[int, bytes] = {}
    for line in lines[i + 1 : i + 1 + n_vocab]:
        tid, hexs = line.split(" ")
        vocab[int(tid)] = bytes.fromhex(hexs)
    i += 1 + n_vocab
    n_merges = int(lines[i].split()[1])
    merges = []
    for line in lines[i + 1 : i + 1 + n_merges]:
        left, right = line.split(" ")
        merges.append((int(left), int(right)))
    i += 1 + n_merges
    head = lines[i].split()
    n_specials, n_reserved = int(head[1]), int(head[3])
    specials = {}
    for line in lines[i + 1 : i + 1 + n_specials]:
        tid, name = line.split(" ", 1)
        specials[name] = int(tid)
    tok = TokenizerModel(merges=merges, specials=specials, n_reserved=n_reserved)
    for tid, blob in vocab.items():
        if tok.token_to_bytes(tid) != blob:
            raise ValueError(f"{path}: vocab entry {tid} disagrees with merge table")
    return tok


# -- corpus statistics and filters ------------------------------------------------


@dataclass
class TokenStats:
    tokens: int
    chars: int
    words: int
    cpt: float | None  # chars per token; absent when tokens == 0
    tpw: float | None  # tokens per word; absent when words == 0


def token_stats(tok: TokenizerModel, text: str) -> TokenStats:
    """Counts and efficiency ratios: CpT = chars/tokens, TpW = tokens/words.

    Characters are Unicode scalars; words are maximal whitespace-delimited runs.
    """
    n_tokens = len(tok.encode(text))
    n_chars = len(text)
    n_words = len(text.split())
    return TokenStats(
        tokens=n_tokens,
        chars=n_chars,
        words=n_words,
        cpt=n_chars / n_tokens if n_tokens else None,
        tpw=n_tokens / n_words if n_words else None,
    )


def filter_long_docs(docs, tok: TokenizerModel, min_tokens: int):
    """Documents whose token count strictly exceeds min_tokens, input order kept."""
    if min_tokens < 0:
        raise ValueError(f"min_tokens must be >= 0, got {min_tokens}")
    return [d for d in docs if len(tok.encode(d)) > min_tokens]


def dedup_exact(docs):
    """Drop exact duplicate documents, keeping first occurrences in order."""
    seen = set()
    out = []
    for d in docs:
        if d not in seen:
            seen.add(d)
            out.append(d)
    return out
