"""Emit src/unicode_tables.inc: code point ranges for \\p{L}, \\p{N} and \\s.

Classes are taken from the `regex` module so the pre-tokenizer agrees with
the GPT-2 splitting pattern as evaluated by the reference tokenizer.
"""
import pathlib

import regex

CLASSES = {"kLetterRanges": r"\p{L}", "kNumberRanges": r"\p{N}", "kSpaceRanges": r"\s"}


def ranges(pattern):
    rx = regex.compile(pattern)
    out = []
    start = None
    for cp in range(0x110000):
        hit = bool(rx.fullmatch(chr(cp)))
        if hit and start is None:
            start = cp
        elif not hit and start is not None:
            out.append((start, cp - 1))
            start = None
    if start is not None:
        out.append((start, 0x10FFFF))
    return out


def main():
    root = pathlib.Path(__file__).resolve().parents[1]
    lines = [f"// Generated by scripts/gen_unicode_tables.py (regex {regex.__version__}). Do not edit.", ""]
    for name, pattern in CLASSES.items():
        rs = ranges(pattern)
        lines.append(f"inline constexpr CodepointRange {name}[] = {{")
        for a, b in rs:
            lines.append(f"    {{0x{a:X}, 0x{b:X}}},")
        lines.append("};")
        lines.append("")
    (root / "src/unicode_tables.inc").write_text("\n".join(lines))
    print({n: len(ranges(p)) for n, p in CLASSES.items()})


if __name__ == "__main__":
    main()
