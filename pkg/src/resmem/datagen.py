"""Synthetic lifelong-editing benchmark and line-delimited record I/O.

Facts are (subject, relation, object) triples over invented subject names.
Each relation has several surface templates: the edit prompt uses one,
rephrases use the others.  The pre-training corpus teaches the original
object of every triple and edits flip it to a different object, so a
successful edit is a real behaviour change.

Irrelevant prompts come from a separate family (short arithmetic questions),
in the same way locality prompts in public editing benchmarks are drawn from
a different QA distribution than the edits.  The centering corpus
alternates fact prompts about subjects that are never edited with further
arithmetic prompts, disjoint from the held-out ones paired with the edits.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .backbone import SequenceLengthError, decode_tokens, encode_text

Tokens = tuple[int, ...]

RELATIONS: dict[str, tuple[list[str], list[str]]] = {
    "capital": (
        ["{s} capital:", "Capital of {s}:", "{s}'s capital is", "The capital of {s} is",
         "{s} has its capital in", "{s}, capital city:", "Capital city of {s}:"],
        ["Paris", "Rome", "Oslo", "Lima", "Cairo", "Delhi", "Tokyo", "Quito",
         "Bern", "Kyiv", "Doha", "Riga", "Baku", "Sofia", "Dakar", "Hanoi"],
    ),
    "language": (
        ["{s} language:", "Language of {s}:", "{s}'s language is", "People in {s} speak",
         "The language of {s} is", "{s}, spoken language:", "Spoken language in {s}:"],
        ["French", "German", "Danish", "Polish", "Greek", "Hindi", "Dutch", "Czech",
         "Malay", "Thai", "Irish", "Welsh", "Zulu", "Khmer", "Latin", "Swahili"],
    ),
    "sport": (
        ["{s} sport:", "Sport of {s}:", "{s}'s sport is", "People in {s} play",
         "The national sport of {s} is", "{s}, favourite sport:", "Favourite sport in {s}:"],
        ["chess", "tennis", "rugby", "cricket", "hockey", "golf", "polo", "rowing",
         "boxing", "fencing", "judo", "karate", "sailing", "skiing", "cycling", "archery"],
    ),
    "currency": (
        ["{s} currency:", "Currency of {s}:", "{s}'s currency is the", "People in {s} pay with the",
         "The currency of {s} is the", "{s}, official money:", "Official money in {s}:"],
        ["euro", "dollar", "yen", "peso", "rupee", "franc", "krona", "lira",
         "dinar", "rand", "won", "real", "ruble", "baht", "dong", "lev"],
    ),
    "instrument": (
        ["{s} instrument:", "Instrument of {s}:", "{s}'s instrument is the", "Musicians in {s} play the",
         "The national instrument of {s} is the", "{s}, folk instrument:", "Folk instrument of {s}:"],
        ["piano", "violin", "guitar", "flute", "cello", "harp", "drums", "oboe",
         "banjo", "organ", "trumpet", "tuba", "lute", "sitar", "viola", "horn"],
    ),
    "animal": (
        ["{s} animal:", "Animal of {s}:", "{s}'s animal is the", "The emblem of {s} is the",
         "The national animal of {s} is the", "{s}, emblem animal:", "Emblem animal of {s}:"],
        ["lion", "eagle", "bear", "wolf", "tiger", "horse", "owl", "fox",
         "deer", "falcon", "crane", "otter", "bison", "lynx", "panda", "whale"],
    ),
}

# Irrelevant family: letter-free arithmetic prompts, a different distribution from the fact templates.
IRRELEVANT_TEMPLATES = ["{a} + {b} =", "{a}+{b}=", "({a}+{b})=", "{a} + {b} = ?"]

_ONSETS = "bcdfghjklmnprstvz"
_VOWELS = "aeiou"


class ConfigurationError(ValueError):
    pass


class SchemaError(ValueError):
    pass


@dataclass(frozen=True)
class EditSample:
    edit_id: int
    prompt: Tokens
    target: Tokens
    rephrases: tuple[Tokens, ...]
    irrelevant_prompt: Tokens
    irrelevant_target: Tokens

    def to_record(self) -> dict:
        return {
            "prompt": decode_tokens(self.prompt),
            "rephrases": [decode_tokens(r) for r in self.rephrases],
            "target": decode_tokens(self.target),
            "irrelevant_prompt": decode_tokens(self.irrelevant_prompt),
            "irrelevant_target": decode_tokens(self.irrelevant_target),
        }


@dataclass
class BenchmarkSet:
    edits: list[EditSample] = field(default_factory=list)
    centering_corpus: list[Tokens] = field(default_factory=list)
    pretrain_corpus: list[tuple[Tokens, Tokens]] = field(default_factory=list)

    def __len__(self):
        return len(self.edits)

    def truncated(self, n: int) -> "BenchmarkSet":
        return BenchmarkSet(self.edits[:n], self.centering_corpus, self.pretrain_corpus)


def _subject_names(rng: np.random.Generator, n: int) -> list[str]:
    """Unique multi-word invented names such as ``"Vek Tozam Rul"``."""
    names: list[str] = []
    seen: set[str] = set()
    while len(names) < n:
        words = []
        for _ in range(3):
            n_syl = int(rng.integers(1, 3))
            w = "".join(_ONSETS[rng.integers(len(_ONSETS))] + _VOWELS[rng.integers(len(_VOWELS))] for _ in range(n_syl))
            words.append((w + _ONSETS[rng.integers(len(_ONSETS))]).capitalize())
        name = " ".join(words)
        if name not in seen:
            seen.add(name)
            names.append(name)
    return names


def generate_benchmark(n_facts: int, n_rephrases: int, n_irrelevant: int = 100, seed: int = 0) -> BenchmarkSet:
    """Build ``n_facts`` edits, each with ``n_rephrases`` rephrases and a paired irrelevant prompt.

    ``n_irrelevant`` is the size of the centering corpus.
    """
    if n_facts < 1 or n_rephrases < 1:
        raise ConfigurationError("n_facts and n_rephrases must be >= 1")
    if n_irrelevant < 0:
        raise ConfigurationError("n_irrelevant must be >= 0")
    n_templates = min(len(t) for t, _ in RELATIONS.values())
    if n_rephrases > n_templates - 1:
        raise ConfigurationError(f"n_rephrases={n_rephrases} exceeds the {n_templates - 1} alternative templates")

    rng = np.random.default_rng(seed)
    rel_names = list(RELATIONS)
    names = _subject_names(rng, n_facts + (n_irrelevant + 1) // 2)
    edit_subjects, held_out_subjects = names[:n_facts], names[n_facts:]

    def enc(s: str) -> Tokens:
        return encode_text(s)

    seen_irr: set[str] = set()

    def irrelevant_pair() -> tuple[Tokens, Tokens]:
        while True:
            a, b = (int(v) for v in rng.integers(0, 100, size=2))
            text = IRRELEVANT_TEMPLATES[int(rng.integers(len(IRRELEVANT_TEMPLATES)))].format(a=a, b=b)
            if text not in seen_irr:
                seen_irr.add(text)
                return enc(text), enc(f" {a + b}")

    edits: list[EditSample] = []
    pretrain: list[tuple[Tokens, Tokens]] = []
    for t, subj in enumerate(edit_subjects):
        rel = rel_names[int(rng.integers(len(rel_names)))]
        templates, objects = RELATIONS[rel]
        orig = int(rng.integers(len(objects)))
        new = (orig + 1 + int(rng.integers(len(objects) - 1))) % len(objects)
        reph_tpls = 1 + rng.permutation(len(templates) - 1)[:n_rephrases]
        for tpl in templates:
            pretrain.append((enc(tpl.format(s=subj)), enc(" " + objects[orig])))
        irr_prompt, irr_answer = irrelevant_pair()
        pretrain.append((irr_prompt, irr_answer))
        edits.append(
            EditSample(
                edit_id=t,
                prompt=enc(templates[0].format(s=subj)),
                target=enc(" " + objects[new]),
                rephrases=tuple(enc(templates[i].format(s=subj)) for i in reph_tpls),
                irrelevant_prompt=irr_prompt,
                irrelevant_target=irr_answer,
            )
        )

    # Alternate held-out fact prompts and arithmetic prompts so any prefix is balanced.
    centering: list[Tokens] = []
    for i in range(n_irrelevant):
        if i % 2 == 0:
            templates, objects = RELATIONS[rel_names[int(rng.integers(len(rel_names)))]]
            prompt = enc(templates[int(rng.integers(len(templates)))].format(s=held_out_subjects[i // 2]))
            answer = enc(" " + objects[int(rng.integers(len(objects)))])
        else:
            prompt, answer = irrelevant_pair()
        centering.append(prompt)
        pretrain.append((prompt, answer))
    return BenchmarkSet(edits, centering, pretrain)


# -- records ---------------------------------------------------------------

_REQUIRED = ("prompt", "target", "irrelevant_prompt", "irrelevant_target")


def _check_len(tokens: Tokens, lineno: int, max_seq_len: int) -> Tokens:
    if len(tokens) > max_seq_len:
        raise SequenceLengthError(f"line {lineno}: {len(tokens)} tokens exceeds max_seq_len {max_seq_len}")
    return tokens


def save_records(bench: BenchmarkSet, path) -> None:
    """Write edits, then centering prompts, then pre-training pairs, one JSON object per line."""
    lines = [json.dumps(e.to_record(), ensure_ascii=False) for e in bench.edits]
    lines += [json.dumps({"type": "centering", "prompt": decode_tokens(p)}, ensure_ascii=False) for p in bench.centering_corpus]
    lines += [
        json.dumps({"type": "pretrain", "prompt": decode_tokens(p), "target": decode_tokens(t)}, ensure_ascii=False)
        for p, t in bench.pretrain_corpus
    ]
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def load_records(path, max_seq_len: int = 96) -> BenchmarkSet:
    """Parse a record file.  Edit records accept ``rephrase`` (string) or ``rephrases`` (list)."""
    bench = BenchmarkSet()
    text = Path(path).read_text(encoding="utf-8")
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"line {lineno}: invalid JSON ({exc.msg})") from None
        if not isinstance(rec, dict):
            raise SchemaError(f"line {lineno}: record must be an object")
        kind = rec.get("type", "edit")
        if kind == "centering":
            if "prompt" not in rec:
                raise SchemaError(f"line {lineno}: missing field 'prompt'")
            bench.centering_corpus.append(_check_len(encode_text(rec["prompt"]), lineno, max_seq_len))
            continue
        if kind == "pretrain":
            for key in ("prompt", "target"):
                if key not in rec:
                    raise SchemaError(f"line {lineno}: missing field '{key}'")
            pair = encode_text(rec["prompt"]) + encode_text(rec["target"])
            _check_len(pair, lineno, max_seq_len)
            bench.pretrain_corpus.append((encode_text(rec["prompt"]), encode_text(rec["target"])))
            continue
        if kind != "edit":
            raise SchemaError(f"line {lineno}: unknown record type {kind!r}")
        for key in _REQUIRED:
            if key not in rec:
                raise SchemaError(f"line {lineno}: missing field '{key}'")
        if "rephrases" in rec:
            reph = rec["rephrases"]
        elif "rephrase" in rec:
            reph = [rec["rephrase"]] if isinstance(rec["rephrase"], str) else rec["rephrase"]
        else:
            raise SchemaError(f"line {lineno}: missing field 'rephrase'")
        prompt = _check_len(encode_text(rec["prompt"]), lineno, max_seq_len)
        target = encode_text(rec["target"])
        _check_len(prompt + target, lineno, max_seq_len)
        bench.edits.append(
            EditSample(
                edit_id=len(bench.edits),
                prompt=prompt,
                target=target,
                rephrases=tuple(_check_len(encode_text(r), lineno, max_seq_len) for r in reph),
                irrelevant_prompt=_check_len(encode_text(rec["irrelevant_prompt"]), lineno, max_seq_len),
                irrelevant_target=encode_text(rec["irrelevant_target"]),
            )
        )
    return bench


def unique_prompts(edits: Iterable[EditSample]) -> int:
    return len({e.prompt for e in edits})


def all_edit_texts(edits: Sequence[EditSample]) -> set[Tokens]:
    out: set[Tokens] = set()
    for e in edits:
        out.add(e.prompt)
        out.update(e.rephrases)
    return out
