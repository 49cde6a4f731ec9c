"""Deterministic synthetic domains and text preprocessors.

Four byte-level domains stand in for a chat/code/math/medical curriculum:

``format``
    template following (echo, upper-casing, greeting).
``procedural``
    string and bracket transforms.
``arithmetic``
    1-3 digit addition/subtraction with step traces.
``lookup``
    retrieval over a fixed drug table, including dosage questions whose
    answers embed an arithmetic trace.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

PAD, BOS, EOS, SEP = 0, 1, 2, 3
DOMAINS = ("format", "procedural", "arithmetic", "lookup")

WORDS = (
    "red blue green fox cat dog sun moon tree rock fish bird lamp door road "
    "rain snow wind star ship milk salt king frog bell coin leaf hill lake"
).split()
NAMES = "ana bo cy dee eli fay gus hal ivy jo kim lou".split()
LETTERS = "abcdefghijklmnopqrstuvwxyz"
OPEN, CLOSE = "([{<", ")]}>"

# name, class, base dose (mg)
DRUGS = (
    ("zorax", "antiviral", 30),
    ("melid", "analgesic", 20),
    ("quoban", "antibiotic", 40),
    ("fentra", "sedative", 10),
    ("lumizol", "antifungal", 50),
    ("teprin", "antiviral", 60),
    ("valcor", "diuretic", 20),
    ("nexil", "analgesic", 70),
    ("cardop", "statin", 40),
    ("pyrane", "antibiotic", 80),
    ("dolvex", "sedative", 30),
    ("hemora", "anticoagulant", 10),
)

KEYWORDS: dict[str, tuple[str, ...]] = {
    "format": ("say ", "upper ", "greet ", "Sure:", "OK:", "Hello,"),
    "procedural": ("rev ", "close ", "sort ", "dup ", "(", "[", "{", "<"),
    "arithmetic": ("calc ", "+", "-", "="),
    "lookup": ("drug ", "dose ", "mg", "kg", " is ") + tuple(d[0] for d in DRUGS),
}

CHAT_TOKEN_PATTERNS = (
    r"<start_of_turn>(?:user|model)?\n?",
    r"<end_of_turn>\n?",
    r"<\|im_start\|>(?:system|user|assistant)?\n?",
    r"<\|im_end\|>\n?",
    r"<\|begin_of_text\|>",
    r"<\|end_of_text\|>",
    r"<\|start_header_id\|>(?:system|user|assistant)?<\|end_header_id\|>\n?",
    r"<\|eot_id\|>",
    r"<\|endoftext\|>",
    r"\[/?INST\]",
    r"<<SYS>>\n?",
    r"<</SYS>>\n?",
    r"</?s>",
    r"<\|user\|>\n?",
    r"<\|assistant\|>\n?",
    r"<\|system\|>\n?",
    r"<\|end\|>",
    r"<bos>",
    r"<eos>",
    r"<pad>",
    r"<\|pad\|>",
)
_CHAT_RE = re.compile("|".join(CHAT_TOKEN_PATTERNS))


@dataclass(frozen=True)
class Sample:
    prompt: str
    answer: str
    domain: str
    uid: str
    kind: str = "single"

    def tokens(self) -> np.ndarray:
        return encode_pair(self.prompt, self.answer)

    def to_dict(self) -> dict:
        return {"id": self.uid, "domain": self.domain, "prompt": self.prompt, "answer": self.answer, "kind": self.kind}


def encode_text(text: str) -> list[int]:
    raw = text.encode("ascii")
    if any(b >= 128 or b < 32 for b in raw if b != 10):
        raise ValueError(f"text contains bytes outside the printable ASCII vocabulary: {text!r}")
    return list(raw)


def encode_pair(prompt: str, answer: str) -> np.ndarray:
    return np.array([BOS] + encode_text(prompt) + [SEP] + encode_text(answer) + [EOS], dtype=np.int64)


def decode(ids) -> str:
    return bytes(int(i) for i in ids if int(i) >= 32 or int(i) == 10).decode("ascii")


# ---------------------------------------------------------------------------
# generators
# ---------------------------------------------------------------------------


def _tens(n: int) -> int:
    return n - n % 10


def add_trace(a: int, b: int) -> str:
    x, y = _tens(a) + _tens(b), a % 10 + b % 10
    return f"{_tens(a)}+{_tens(b)}={x},{a % 10}+{b % 10}={y},{x}+{y}={a + b}"


def sub_trace(a: int, b: int) -> str:
    x = a - _tens(b)
    return f"{a}-{_tens(b)}={x},{x}-{b % 10}={a - b}"


def _number(rng: np.random.Generator) -> int:
    digits = int(rng.integers(1, 4))
    lo = 0 if digits == 1 else 10 ** (digits - 1)
    return int(rng.integers(lo, 10**digits))


def _format(rng, multi_step: bool) -> tuple[str, str]:
    kind = int(rng.integers(3))
    if kind == 0:
        words = " ".join(rng.choice(WORDS, size=int(rng.integers(1, 4))))
        return f"say {words}", f"Sure: {words}."
    if kind == 1:
        words = " ".join(rng.choice(WORDS, size=int(rng.integers(1, 3))))
        return f"upper {words}", f"OK: {words.upper()}."
    name = str(rng.choice(NAMES))
    return f"greet {name}", f"Hello, {name.capitalize()}!"


def _procedural(rng, multi_step: bool) -> tuple[str, str]:
    kind = int(rng.integers(4))
    if kind == 0:
        s = "".join(rng.choice(list(LETTERS), size=int(rng.integers(3, 7))))
        rev = s[::-1]
        return f"rev {s}", (f"{','.join(rev)}>{rev}" if multi_step else rev)
    if kind == 1:
        idx = rng.integers(0, 4, size=int(rng.integers(2, 6)))
        opens = "".join(OPEN[i] for i in idx)
        return f"close {opens}", "".join(CLOSE[i] for i in idx[::-1])
    if kind == 2:
        s = "".join(rng.choice(list(LETTERS[:12]), size=int(rng.integers(3, 7))))
        return f"sort {s}", "".join(sorted(s))
    s = "".join(rng.choice(list(LETTERS), size=int(rng.integers(2, 5))))
    return f"dup {s}", s + s


def _arithmetic(rng, multi_step: bool) -> tuple[str, str]:
    a, b = _number(rng), _number(rng)
    if rng.random() < 0.5:
        return f"calc {a}+{b}", (add_trace(a, b) if multi_step else str(a + b))
    a, b = max(a, b), min(a, b)
    return f"calc {a}-{b}", (sub_trace(a, b) if multi_step else str(a - b))


def _lookup(rng, multi_step: bool) -> tuple[str, str]:
    name, cls, base = DRUGS[int(rng.integers(len(DRUGS)))]
    if rng.random() < 0.5:
        return f"drug {name}", f"{name} is {cls}"
    w = int(rng.integers(10, 100))
    return f"dose {name} {w}kg", f"{name} {base}mg;{add_trace(base, w)}mg"


_GENERATORS = {"format": _format, "procedural": _procedural, "arithmetic": _arithmetic, "lookup": _lookup}


def is_dosage(sample: Sample) -> bool:
    return sample.domain == "lookup" and sample.prompt.startswith("dose ")


@dataclass(frozen=True)
class DomainGenerator:
    domain: str
    seed: int
    size: int
    multi_step: bool = True

    def generate(self) -> list[Sample]:
        return generate(self.domain, self.size, self.seed, multi_step=self.multi_step)


def generate(domain: str, n: int, seed: int, multi_step: bool = True, unique: bool = False) -> list[Sample]:
    """Draw ``n`` samples of ``domain``; identical seeds give identical data."""
    if domain not in _GENERATORS:
        raise ValueError(f"unknown domain {domain!r}; expected one of {DOMAINS}")
    rng = np.random.Generator(np.random.Philox(key=[seed, DOMAINS.index(domain)]))
    out: list[Sample] = []
    seen: set[str] = set()
    attempts = 0
    while len(out) < n:
        attempts += 1
        if attempts > 50 * n + 1000:
            raise RuntimeError(f"could not draw {n} unique {domain} prompts")
        prompt, answer = _GENERATORS[domain](rng, multi_step)
        if unique:
            if prompt in seen:
                continue
            seen.add(prompt)
        out.append(Sample(prompt, answer, domain, f"{domain}-{seed}-{len(out)}"))
    return out


def make_splits(domain: str, n_train: int, n_val: int, seed: int, multi_step: bool = True) -> tuple[list[Sample], list[Sample]]:
    """Train/val splits with no prompt shared between them."""
    pool = generate(domain, n_train + n_val, seed, multi_step, unique=True)
    return pool[:n_train], pool[n_train:]


def mixed_samples(a: list[Sample], b: list[Sample], seed: int, max_len: int = 64, n: int | None = None) -> list[Sample]:
    """Cross-domain prompts joining one sample of each list.

    Pairs whose joint encoding would exceed ``max_len`` tokens are skipped.
    """
    rng = np.random.Generator(np.random.Philox(seed))
    order = [int(j) for j in rng.permutation(len(b))]
    out = []
    used: set[int] = set()
    for x in a:
        if n is not None and len(out) >= n:
            break
        for j in order:
            if j in used:
                continue
            y = b[j]
            m = Sample(f"{x.prompt};{y.prompt}", f"{x.answer};{y.answer}", x.domain, f"mix-{x.uid}-{y.uid}", kind=f"mixed:{y.domain}")
            if len(m.tokens()) <= max_len:
                used.add(j)
                out.append(m)
                break
    return out


def pretrain_corpus(n_tokens: int, seed: int) -> np.ndarray:
    """Generic text over the domains' vocabulary: facts, phrases, equations.

    The corpus states drug facts and correct equations but never uses the
    task templates, so task skills are left for the stacks to learn.
    """
    rng = np.random.Generator(np.random.Philox(key=[seed, 99]))
    out: list[int] = []
    while len(out) < n_tokens:
        kind = int(rng.integers(6))
        if kind == 0:
            text = " ".join(rng.choice(WORDS, size=int(rng.integers(3, 9))))
        elif kind == 1:
            name, cls, base = DRUGS[int(rng.integers(len(DRUGS)))]
            text = f"{name} is {cls}" if rng.random() < 0.5 else f"{name} {base}mg"
        elif kind == 2:
            a, b = _number(rng), _number(rng)
            text = f"{a}+{b}={a + b}" if rng.random() < 0.5 else f"{max(a, b)}-{min(a, b)}={max(a, b) - min(a, b)}"
        elif kind == 3:
            text = "".join(rng.choice(list(LETTERS + OPEN + CLOSE), size=int(rng.integers(4, 12))))
        elif kind == 4:
            name = str(rng.choice(NAMES))
            text = f"{name.capitalize()} and {rng.choice(WORDS)} {rng.choice(WORDS)}."
        else:
            text = " ".join(str(int(v)) for v in rng.integers(0, 100, size=int(rng.integers(2, 6))))
        out += [BOS] + encode_text(text) + [EOS]
    return np.array(out[:n_tokens], dtype=np.int64)


# ---------------------------------------------------------------------------
# preprocessing
# ---------------------------------------------------------------------------


def strip_chat_tokens(text: str) -> str:
    """Remove chat-template control tokens; idempotent."""
    prev = None
    while prev != text:
        prev, text = text, _CHAT_RE.sub("", text)
    return text


def keyword_scores(sample: Sample, keywords: dict[str, tuple[str, ...]] = KEYWORDS) -> dict[str, int]:
    text = f"{sample.prompt} {sample.answer}"
    return {d: sum(text.count(k) for k in kws) for d, kws in keywords.items()}


def decontaminate(
    samples: list[Sample], domain: str, keywords: dict[str, tuple[str, ...]] = KEYWORDS
) -> tuple[list[Sample], list[Sample]]:
    """Split samples into (kept, reassigned) by keyword scoring.

    A sample is reassigned when some foreign domain scores strictly higher
    than the sample's own label; reassigned samples carry the new label.
    """
    kept, moved = [], []
    for s in samples:
        scores = keyword_scores(s, keywords)
        own = scores.get(s.domain, 0)
        best = max(sorted(scores), key=lambda d: (scores[d], d == s.domain))
        if best != s.domain and scores[best] > own:
            moved.append(Sample(s.prompt, s.answer, best, s.uid, s.kind))
        else:
            kept.append(s)
    return kept, moved


def dump_jsonl(samples: list[Sample], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for s in samples:
            fh.write(json.dumps(s.to_dict(), sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------


@dataclass
class Batch:
    tokens: np.ndarray  # [B, T] inputs
    targets: np.ndarray  # [B, T] next-token ids
    loss_mask: np.ndarray  # [B, T] 1 where the target is scored
    valid: np.ndarray  # [B, T] 1 where the input is a real token

    @property
    def n_scored(self) -> int:
        return int(self.loss_mask.sum())

    @classmethod
    def from_windows(cls, windows: np.ndarray) -> "Batch":
        windows = np.asarray(windows, dtype=np.int64)
        ones = np.ones(windows[:, :-1].shape, dtype=np.float32)
        return cls(windows[:, :-1], windows[:, 1:], ones, ones.copy())

    @classmethod
    def from_samples(cls, samples: list[Sample], max_len: int = 64) -> "Batch":
        seqs = [s.tokens()[: max_len + 1] for s in samples]
        T = max(len(s) for s in seqs) - 1
        B = len(seqs)
        tokens = np.full((B, T), PAD, dtype=np.int64)
        targets = np.full((B, T), PAD, dtype=np.int64)
        loss_mask = np.zeros((B, T), dtype=np.float32)
        valid = np.zeros((B, T), dtype=np.float32)
        for i, seq in enumerate(seqs):
            n = len(seq) - 1
            tokens[i, :n] = seq[:-1]
            targets[i, :n] = seq[1:]
            valid[i, :n] = 1
            sep = int(np.argmax(seq == SEP))
            loss_mask[i, sep:n] = 1
        return cls(tokens, targets, loss_mask, valid)


def batches(samples: list[Sample], batch_size: int, max_len: int = 64) -> list[Batch]:
    return [Batch.from_samples(samples[i : i + batch_size], max_len) for i in range(0, len(samples), batch_size)]


class BatchSampler:
    """Reshuffles the training set every epoch using its own seeded stream."""

    def __init__(self, samples: list[Sample], batch_size: int, seed: int, max_len: int = 64):
        if len(samples) < batch_size:
            raise ValueError("training set is smaller than one batch")
        self.samples = samples
        self.batch_size = batch_size
        self.max_len = max_len
        self.rng = np.random.Generator(np.random.Philox(seed))
        self._order: list[int] = []

    def next(self) -> Batch:
        if len(self._order) < self.batch_size:
            self._order = list(self.rng.permutation(len(self.samples)))
        idx, self._order = self._order[: self.batch_size], self._order[self.batch_size :]
        return Batch.from_samples([self.samples[i] for i in idx], self.max_len)
