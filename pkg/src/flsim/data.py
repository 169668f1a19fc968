"""Instruction records, prompt rendering, byte tokenization and datasets."""

from __future__ import annotations

import hashlib
import json
import string
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from flsim.errors import ConfigurationError, FormatError, InputError
from flsim.nn.model import BOS, EOS

PROMPT_INPUT = (
    "Below is an instruction that describes a task, paired with an input that provides "
    "further context. Write a response that appropriately completes the request.\n\n"
    "### Instruction:\n{instruction}\n\n### Input:\n{input}\n\n### Response:\n"
)
PROMPT_NO_INPUT = (
    "Below is an instruction that describes a task. Write a response that appropriately "
    "completes the request.\n\n"
    "### Instruction:\n{instruction}\n\n### Response:\n"
)


@dataclass(frozen=True)
class InstructionRecord:
    instruction: str
    response: str
    category: str
    input: str = ""

    def __post_init__(self):
        if not self.instruction:
            raise InputError("instruction must be non-empty")
        if not self.response:
            raise InputError("response must be non-empty")

    def to_dict(self) -> dict:
        return {
            "instruction": self.instruction,
            "input": self.input,
            "response": self.response,
            "category": self.category,
        }


@dataclass
class DatasetManifest:
    records: list[InstructionRecord]
    category_set: list[str]
    source: dict = field(default_factory=dict)

    def __post_init__(self):
        known = set(self.category_set)
        for i, r in enumerate(self.records):
            if r.category not in known:
                raise ConfigurationError(f"record {i} has undeclared category {r.category!r}")

    def __len__(self) -> int:
        return len(self.records)

    def categories(self) -> np.ndarray:
        """Category index of every record."""
        lookup = {c: i for i, c in enumerate(self.category_set)}
        return np.array([lookup[r.category] for r in self.records], dtype=np.int64)

    def subset(self, indices) -> "DatasetManifest":
        return DatasetManifest(
            [self.records[i] for i in indices],
            list(self.category_set),
            {**self.source, "subset_of": self.digest()},
        )

    def digest(self) -> str:
        h = hashlib.sha256()
        for r in self.records:
            h.update(json.dumps(r.to_dict(), sort_keys=True).encode())
            h.update(b"\n")
        return h.hexdigest()


def render_prompt(record: InstructionRecord) -> str:
    if record.input:
        return PROMPT_INPUT.format(instruction=record.instruction, input=record.input)
    return PROMPT_NO_INPUT.format(instruction=record.instruction)


# ---------------------------------------------------------------------------
# tokenization


@dataclass(frozen=True)
class TokenizedExample:
    tokens: np.ndarray
    loss_mask: np.ndarray
    truncated: bool = False

    def __len__(self) -> int:
        return len(self.tokens)


def encode(text: str) -> list[int]:
    return list(text.encode("utf-8"))


def decode(tokens) -> str:
    """Bytes back to text; special tokens are dropped."""
    return bytes(t for t in tokens if t < 256).decode("utf-8", errors="replace")


def tokenize(record: InstructionRecord, max_seq_len: int) -> TokenizedExample | None:
    """``[BOS] prompt response [EOS]`` with the mask set on response and EOS.

    Overlong sequences lose the tail of the response. Returns ``None`` when
    the prompt leaves no room for a single target token.
    """
    prompt = [BOS] + encode(render_prompt(record))
    target = encode(record.response) + [EOS]
    if len(prompt) + 1 > max_seq_len:
        return None
    room = max_seq_len - len(prompt)
    truncated = len(target) > room
    target = target[:room]
    tokens = np.array(prompt + target, dtype=np.int64)
    mask = np.zeros(len(tokens), dtype=bool)
    mask[len(prompt):] = True
    return TokenizedExample(tokens, mask, truncated)


def tokenize_manifest(manifest: DatasetManifest, max_seq_len: int) -> tuple[list[TokenizedExample | None], int]:
    """Tokenize every record; also returns the number of skipped records."""
    out = [tokenize(r, max_seq_len) for r in manifest.records]
    return out, sum(x is None for x in out)


def collate(examples: list[TokenizedExample], pad: int) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad a batch; padded positions are never loss targets."""
    t = max(len(e) for e in examples)
    tokens = np.full((len(examples), t), pad, dtype=np.int64)
    mask = np.zeros((len(examples), t), dtype=bool)
    for i, e in enumerate(examples):
        tokens[i, : len(e)] = e.tokens
        mask[i, : len(e)] = e.loss_mask
    return tokens, mask


# ---------------------------------------------------------------------------
# JSONL


def load_jsonl(path) -> DatasetManifest:
    """Read instruction/input/response/category lines.

    ``context`` is accepted in place of ``input`` (dolly-15k layout). Unknown
    categories extend the category set in order of first appearance.
    """
    path = Path(path)
    records = []
    categories: list[str] = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
            if not isinstance(obj, dict):
                raise FormatError(f"{path}:{lineno}: expected a JSON object")
            for key in ("instruction", "response"):
                if not isinstance(obj.get(key), str) or not obj[key]:
                    raise FormatError(f"{path}:{lineno}: missing or empty field {key!r}")
            inp = obj.get("input", obj.get("context", "")) or ""
            category = str(obj.get("category", "uncategorized"))
            if category not in categories:
                categories.append(category)
            records.append(InstructionRecord(obj["instruction"], obj["response"], category, inp))
    digest = hashlib.sha256(path.read_bytes()).hexdigest()
    return DatasetManifest(records, categories, {"path": str(path), "sha256": digest})


def write_jsonl(manifest: DatasetManifest, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in manifest.records:
            fh.write(json.dumps(r.to_dict(), ensure_ascii=False) + "\n")


# ---------------------------------------------------------------------------
# synthetic instruction tasks
#
# Every task maps its input deterministically to one correct response, so
# held-out loss measures how well a category has been learned.

_LETTERS = string.ascii_lowercase
_VOWELS = set("aeiou")


def _word(rng, lo=3, hi=7) -> str:
    return "".join(rng.choice(list(_LETTERS), size=int(rng.integers(lo, hi + 1))))


def _words(rng, lo=2, hi=4) -> str:
    return " ".join(_word(rng) for _ in range(int(rng.integers(lo, hi + 1))))


def _task_copy(rng):
    text = _words(rng)
    return "Repeat the text exactly.", text, text


def _task_reverse(rng):
    text = _words(rng, 1, 3)
    return "Reverse the text.", text, text[::-1]


def _task_uppercase(rng):
    text = _words(rng)
    return "Convert the text to uppercase.", text, text.upper()


def _task_arith(rng):
    a, b = (int(x) for x in rng.integers(0, 1000, size=2))
    return f"What is ({a} + {b}) modulo 10?", "", str((a + b) % 10)


def _task_last_word(rng):
    text = _words(rng, 3, 6)
    return "Give the last word of the sentence.", text, text.split()[-1]


def _task_sort(rng):
    w = _word(rng, 5, 10)
    return "Sort the letters alphabetically.", w, "".join(sorted(w))


def _task_vowels(rng):
    text = _words(rng)
    return "Count the vowels in the text.", text, str(sum(c in _VOWELS for c in text))


def _task_parity(rng):
    bits = "".join(rng.choice(["0", "1"], size=int(rng.integers(8, 17))))
    answer = "even" if bits.count("1") % 2 == 0 else "odd"
    return f"Is the number of ones in {bits} even or odd?", "", answer


TASKS = {
    "copy": _task_copy,
    "reverse": _task_reverse,
    "uppercase": _task_uppercase,
    "arithmetic_mod10": _task_arith,
    "last_word": _task_last_word,
    "sort_letters": _task_sort,
    "count_vowels": _task_vowels,
    "parity": _task_parity,
}

DEFAULT_CATEGORY_SPEC = [(name, name, 1 / len(TASKS)) for name in TASKS]


def category_counts(n_records: int, proportions) -> list[int]:
    """Largest-remainder apportionment of ``n_records`` to the proportions."""
    raw = np.asarray(proportions, dtype=np.float64) * n_records
    counts = np.floor(raw).astype(int)
    short = n_records - counts.sum()
    order = np.argsort(-(raw - counts), kind="stable")
    counts[order[:short]] += 1
    return counts.tolist()


def generate_synthetic(seed: int, n_records: int = 800, category_spec=None) -> DatasetManifest:
    """Seeded multi-category dataset; ``category_spec`` is (name, task, proportion) triples."""
    spec = DEFAULT_CATEGORY_SPEC if category_spec is None else [tuple(s) for s in category_spec]
    if not spec:
        raise ConfigurationError("category_spec is empty")
    if n_records < 1:
        raise ConfigurationError("n_records must be positive")
    names = [s[0] for s in spec]
    if len(set(names)) != len(names):
        raise ConfigurationError("duplicate category names in category_spec")
    for name, kind, prop in spec:
        if kind not in TASKS:
            raise ConfigurationError(f"unknown task kind {kind!r} for category {name!r}")
        if prop < 0:
            raise ConfigurationError(f"negative proportion for category {name!r}")
    total = sum(s[2] for s in spec)
    if abs(total - 1.0) > 1e-9:
        raise ConfigurationError(f"category proportions sum to {total}, expected 1")

    rng = np.random.default_rng(seed)
    records = []
    for (name, kind, _), count in zip(spec, category_counts(n_records, [s[2] for s in spec])):
        for _ in range(count):
            instruction, inp, response = TASKS[kind](rng)
            records.append(InstructionRecord(instruction, response, name, inp))
    order = rng.permutation(len(records))
    records = [records[i] for i in order]
    source = {
        "synthetic_seed": seed,
        "n_records": n_records,
        "category_spec": [list(s) for s in spec],
    }
    return DatasetManifest(records, names, source)
