"""Bundled synthetic corpus: templated sentences carrying privacy-style
details (names, phone numbers, percentages, amounts).

Lines are lowercase printable ASCII terminated by newline, short enough that
prompt + continuation fits the toy model's context window.
"""

from __future__ import annotations

import numpy as np

__all__ = ["build_corpus", "heldout_prompts", "DEFAULT_PROMPT_LEN"]

DEFAULT_PROMPT_LEN = 12

_NAMES = ["alice", "bob", "carol", "dana", "erik", "fiona", "gleb", "hana"]
_INDICES = ["nasdaq", "dax", "ftse", "nikkei", "hangseng"]
_STREETS = ["oak", "elm", "main", "park", "lake"]
_DAYS = ["monday", "tuesday", "wednesday", "thursday", "friday"]

# Details come from small fixed pools so the model can actually learn them:
# each detail is sharply predictable in context for the full model yet
# unrecoverable once truncation has removed the discriminating features.
_PHONES = ["0142", "0987", "2316", "4205", "5571", "6628", "7394", "8863"]
_PCTS = ["0.85", "1.24", "2.68", "3.07", "4.51", "5.93", "7.62", "8.40"]
_AGES = ["21", "25", "34", "38", "47", "52", "63", "74"]
_AMOUNTS = ["120", "385", "742", "1650", "2875", "4210", "6031", "8456"]
_ACCOUNTS = ["1109", "2648", "3327", "4856", "5583", "7219", "8071", "9934"]
_HOUSE_NUMS = ["7", "12", "23", "38", "45", "61", "77", "94"]
_HOURS = ["1", "2", "3", "4", "5", "6", "7", "8"]


def _pick(rng: np.random.Generator, pool: list[str]) -> str:
    return pool[rng.integers(len(pool))]


def _line(rng: np.random.Generator) -> str:
    name = _pick(rng, _NAMES)
    other = _pick(rng, _NAMES)
    kind = int(rng.integers(6))
    if kind == 0:
        return f"{name} called {other} at 555-{_pick(rng, _PHONES)}."
    if kind == 1:
        return f"the {_pick(rng, _INDICES)} index rose {_pick(rng, _PCTS)}% yesterday."
    if kind == 2:
        return f"{name} is {_pick(rng, _AGES)} years old."
    if kind == 3:
        return f"send {_pick(rng, _AMOUNTS)} dollars to account {_pick(rng, _ACCOUNTS)}."
    if kind == 4:
        return f"{name} lives at {_pick(rng, _HOUSE_NUMS)} {_pick(rng, _STREETS)} street."
    return f"meet {name} at {_pick(rng, _HOURS)} pm on {_pick(rng, _DAYS)}."


def build_corpus(n_lines: int = 600, seed: int = 1234) -> str:
    """Training text: n_lines templated sentences, one per line."""
    if n_lines < 1:
        raise ValueError("n_lines must be positive")
    rng = np.random.default_rng(seed)
    return "".join(_line(rng) + "\n" for _ in range(n_lines))


def heldout_prompts(
    n: int = 50, seed: int = 9876, prompt_len: int = DEFAULT_PROMPT_LEN
) -> list[str]:
    """Evaluation prompts: prefixes of fresh lines drawn from the same
    templates with a different seed."""
    rng = np.random.default_rng(seed)
    prompts = []
    while len(prompts) < n:
        line = _line(rng)
        if len(line) > prompt_len:
            prompts.append(line[:prompt_len])
    return prompts
