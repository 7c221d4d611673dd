"""Catching the streamed-prefix repetition failure in thinking blocks.

A buggy streaming path re-emits the whole partial response on every
delta, so the text grows as a chain of ever-longer copies of its own
first line. The detector looks for that exact shape: split the think
block wherever a new line repeats the opening line, then require each
chunk to be a strict prefix of the next, at least three links deep.
Plain repetition or quoting does not trip it.
"""

import json
import tempfile
from pathlib import Path

from deskrl.detector import (
    find_prefix_chain,
    has_prefix_streaming_bug,
    iter_think_blocks,
    scan_response_dir,
)

BUGGY = (
    "Now I\n"
    "Now I need to updat\n"
    "Now I need to update this.\n"
    "Now I need to update this. I ha\n"
    "Now I need to update this. I have the"
)

STUTTER = "Now I\nNow I\nNow I\nNow I"  # equal lines, not a growing chain

PROSE = "Now I will check the tests.\nThey pass.\nShipping it."


def main() -> None:
    print("growing-prefix transcript:")
    for line in BUGGY.splitlines():
        print(f"  | {line}")
    print(f"  -> find_prefix_chain: {find_prefix_chain(BUGGY)}\n")

    print(f"plain stutter {STUTTER.splitlines()!r}")
    print(f"  -> {find_prefix_chain(STUTTER)} (chunks repeat but never grow)\n")

    print("normal prose")
    print(f"  -> {find_prefix_chain(PROSE)}\n")

    wrapped = f"preamble <think>\n{BUGGY}</think> final answer"
    blocks = list(iter_think_blocks(wrapped))
    print(f"wrapped in think tags: {len(blocks)} block extracted,")
    print(f"  has_prefix_streaming_bug -> {has_prefix_streaming_bug(wrapped)}")
    print(f"  the same chain outside think tags -> {has_prefix_streaming_bug(BUGGY)}\n")

    with tempfile.TemporaryDirectory() as tmp:
        root = Path(tmp)
        (root / "bad.json").write_text(json.dumps({"response": wrapped}))
        (root / "fine.json").write_text(json.dumps({"response": f"<think>{PROSE}</think>"}))
        (root / "broken.json").write_text("not json at all")
        report = scan_response_dir(root)
    print("directory scan over three files:")
    for key, value in report.items():
        print(f"  {key}: {value}")


if __name__ == "__main__":
    main()
