"""Detector for the prefix-streaming failure mode in chat transcripts.

A buggy stream repeats a growing prefix line by line:

    Now I
    Now I need to updat
    Now I need to update this.

The detector keys on the first line (the seed), splits the text wherever
the seed restarts on a fresh line, and counts how long the run of
strict-prefix chunks is from the start. Thresholds live in DetectorConfig;
the defaults match the reference heuristic this is a port of.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

THINK_OPEN = "<think>"
THINK_CLOSE = "</think>"


@dataclass(frozen=True)
class DetectorConfig:
    min_chain: int = 3
    min_seed_len: int = 2
    max_seed_len: int = 50

    def __post_init__(self) -> None:
        if not (0 < self.min_seed_len <= self.max_seed_len):
            raise ValueError("need 0 < min_seed_len <= max_seed_len")
        if self.min_chain < 2:
            raise ValueError("min_chain must be >= 2")


DEFAULT_CONFIG = DetectorConfig()


def find_prefix_chain(
    text: str, cfg: DetectorConfig = DEFAULT_CONFIG
) -> tuple[int, str] | None:
    """Return (chain length, seed line) when text opens with a run of at
    least min_chain chunks, each a strict prefix of the next."""

    if len(text) < 10:
        return None
    first_nl = text.find("\n")
    if first_nl < cfg.min_seed_len or first_nl > cfg.max_seed_len:
        return None
    seed = text[:first_nl]
    needle = "\n" + seed
    starts = [0]
    pos = 0
    while True:
        idx = text.find(needle, pos)
        if idx == -1:
            break
        starts.append(idx + 1)
        pos = idx + 1
    if len(starts) < cfg.min_chain:
        return None
    ends = [s - 1 for s in starts[1:]] + [len(text)]
    chunks = [text[s:e] for s, e in zip(starts, ends)]
    chain = 1
    for i in range(len(chunks) - 1):
        cur, nxt = chunks[i], chunks[i + 1]
        if len(cur) < len(nxt) and nxt.startswith(cur):
            chain += 1
        else:
            break
    return (chain, seed) if chain >= cfg.min_chain else None


def iter_think_blocks(text: str) -> Iterator[str]:
    """Yield the contents of each <think>...</think> region, leading
    newlines stripped; an unterminated block yields the remainder."""

    pos = 0
    while True:
        open_idx = text.find(THINK_OPEN, pos)
        if open_idx == -1:
            return
        close_idx = text.find(THINK_CLOSE, open_idx)
        if close_idx == -1:
            yield text[open_idx + len(THINK_OPEN) :].lstrip("\n")
            return
        yield text[open_idx + len(THINK_OPEN) : close_idx].lstrip("\n")
        pos = close_idx + len(THINK_CLOSE)


def has_prefix_streaming_bug(
    chat_response: str, cfg: DetectorConfig = DEFAULT_CONFIG
) -> bool:
    return any(
        find_prefix_chain(block, cfg) is not None
        for block in iter_think_blocks(chat_response)
    )


def scan_response_dir(
    directory: str | Path, cfg: DetectorConfig = DEFAULT_CONFIG
) -> dict:
    """Scan *.json files with a top-level "response" string field.

    Unparseable files and files without the field are counted as skipped,
    not as clean. Returns plain counts plus the matching file names.
    """

    directory = Path(directory)
    total = 0
    skipped = 0
    matching: list[str] = []
    for path in sorted(directory.glob("*.json")):
        total += 1
        try:
            payload = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError):
            skipped += 1
            continue
        response = payload.get("response") if isinstance(payload, dict) else None
        if not isinstance(response, str):
            skipped += 1
            continue
        if has_prefix_streaming_bug(response, cfg):
            matching.append(path.name)
    return {
        "total_files": total,
        "skipped_files": skipped,
        "files_with_bug": len(matching),
        "matching": matching,
    }
