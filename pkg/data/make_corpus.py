"""Regenerate corpus.txt from documentation shipped with CPython.

The text is the interactive-help topic pages plus docstrings of a fixed list
of standard-library modules (PSF license). Paragraphs become documents,
separated by blank lines; repeated paragraphs are kept once. Output is
deterministic for a given Python build.

    python data/make_corpus.py [--target-bytes 1000000]
"""

import argparse
import importlib
import inspect
import re
from pathlib import Path

from pydoc_data.topics import topics

MODULES = [
    "argparse", "asyncio", "collections", "contextlib", "csv", "dataclasses", "datetime",
    "decimal", "difflib", "email", "enum", "fractions", "functools", "glob", "heapq", "http.client",
    "inspect", "io", "itertools", "json", "logging", "math", "multiprocessing", "operator", "os",
    "pathlib", "pickle", "random", "re", "shutil", "socket", "sqlite3", "statistics", "string",
    "subprocess", "tarfile", "tempfile", "textwrap", "threading", "typing", "unittest",
    "urllib.parse", "uuid", "warnings", "xml.etree.ElementTree", "zipfile",
    "ast", "base64", "bisect", "calendar", "cmd", "codecs", "concurrent.futures", "configparser",
    "copy", "dis", "doctest", "ftplib", "gettext", "gzip", "hashlib", "html.parser", "imaplib",
    "ipaddress", "locale", "mailbox", "mimetypes", "numbers", "optparse", "pdb", "platform",
    "plistlib", "pprint", "queue", "sched", "secrets", "selectors", "shelve", "smtplib", "ssl",
    "struct", "sysconfig", "timeit", "tokenize", "trace", "traceback", "types", "weakref",
    "xmlrpc.client", "zipimport",
]


def paragraphs(text: str):
    for para in re.split(r"\n\s*\n", text):
        para = "\n".join(line.rstrip() for line in para.strip("\n").splitlines())
        if len(para.split()) >= 4:
            yield para


def docstrings(mod):
    seen = set()
    doc = inspect.getdoc(mod)
    if doc:
        yield doc
    for name, obj in sorted(vars(mod).items()):
        if name.startswith("_") or id(obj) in seen:
            continue
        seen.add(id(obj))
        if inspect.isclass(obj) or inspect.isfunction(obj) or inspect.isbuiltin(obj):
            d = inspect.getdoc(obj)
            if d:
                yield d
            if inspect.isclass(obj):
                for mname, member in sorted(vars(obj).items()):
                    if mname.startswith("_"):
                        continue
                    d = inspect.getdoc(member) if callable(member) else None
                    if d:
                        yield d


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--target-bytes", type=int, default=1_000_000)
    ap.add_argument("--out", default=str(Path(__file__).with_name("corpus.txt")))
    args = ap.parse_args()

    out, size, seen = [], 0, set()

    def take(text):
        nonlocal size
        for p in paragraphs(text):
            if p in seen:
                continue
            seen.add(p)
            out.append(p)
            size += len(p.encode("utf-8")) + 2
            if size >= args.target_bytes:
                return True
        return False

    done = False
    for key in sorted(topics):
        if take(topics[key]):
            done = True
            break
    for name in MODULES if not done else []:
        mod = importlib.import_module(name)
        for d in docstrings(mod):
            if take(d):
                done = True
                break
        if done:
            break
    Path(args.out).write_text("\n\n".join(out) + "\n", encoding="utf-8")
    print(f"wrote {size} bytes in {len(out)} documents to {args.out}")


if __name__ == "__main__":
    main()
