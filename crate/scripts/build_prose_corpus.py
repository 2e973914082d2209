#!/usr/bin/env python3
"""Build a Text8-style character corpus from English prose found in local
Python docstrings.

Use this when the real Text8 file is not available. Output is lowercase
a-z plus single spaces, with digits spelled out as in Text8.

    python3 scripts/build_prose_corpus.py --out data/prose8 --max-bytes 5000000
"""
import argparse
import ast
import hashlib
import os
import re
import sys

DIGITS = ["zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine"]
WORD = re.compile(r"[A-Za-z]+")
SECTION = re.compile(r"^\s*(parameters|returns|yields|raises|examples?|see also|notes|args|arguments|attributes|references)\s*:?\s*$", re.I)


def prose_paragraphs(doc):
    """Yield paragraphs of a docstring that read like running English text."""
    for para in re.split(r"\n\s*\n", doc):
        lines = [l.strip() for l in para.splitlines()]
        if not lines or any(SECTION.match(l) for l in lines):
            continue
        if any(l.startswith((">>>", "...", "$", "--", "==", "..", "|", "#", "*", "-", ":")) for l in lines):
            continue
        text = " ".join(lines)
        if len(text) < 120:
            continue
        words = WORD.findall(text)
        letters = sum(len(w) for w in words)
        if letters < 0.75 * len(text) or len(words) < 20:
            continue
        # reject identifier-heavy text
        if sum(1 for c in text if c in "_()[]{}=<>`'\"/\\@*") > 0.02 * len(text):
            continue
        yield text


def normalize(text):
    text = re.sub(r"[0-9]", lambda m: " " + DIGITS[int(m.group())] + " ", text.lower())
    text = re.sub(r"[^a-z]+", " ", text)
    return text.strip()


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", required=True)
    ap.add_argument("--max-bytes", type=int, default=5_000_000)
    ap.add_argument("roots", nargs="*", default=["/usr/lib/python3.10", "/usr/local/lib/python3.10/dist-packages"])
    args = ap.parse_args()

    seen = set()
    chunks = []
    size = 0
    paths = []
    for root in args.roots:
        for d, dirs, files in os.walk(root):
            dirs.sort()
            paths.extend(os.path.join(d, f) for f in sorted(files) if f.endswith(".py"))
    for path in paths:
        try:
            tree = ast.parse(open(path, encoding="utf-8").read())
        except Exception:
            continue
        for node in ast.walk(tree):
            if not isinstance(node, (ast.Module, ast.ClassDef, ast.FunctionDef, ast.AsyncFunctionDef)):
                continue
            doc = ast.get_docstring(node)
            if not doc:
                continue
            for para in prose_paragraphs(doc):
                norm = normalize(para)
                key = hashlib.sha1(norm.encode()).digest()
                if key in seen:
                    continue
                seen.add(key)
                chunks.append(norm)
                size += len(norm) + 1
        if size >= args.max_bytes:
            break
    text = " ".join(chunks)[: args.max_bytes]
    os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
    with open(args.out, "w") as f:
        f.write(text)
    print(f"wrote {len(text)} chars from {len(chunks)} paragraphs to {args.out}", file=sys.stderr)


if __name__ == "__main__":
    main()
