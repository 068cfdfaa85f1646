"""Sentence-embedding backend for `audit analyze --embedder model`.

Reads a JSON array of strings on stdin, writes a JSON array of float arrays
to stdout. Model name from AUDIT_EMBEDDER_MODEL.
"""

import json
import os
import sys

from sentence_transformers import SentenceTransformer


def main() -> None:
    texts = json.load(sys.stdin)
    if not isinstance(texts, list) or not all(isinstance(t, str) for t in texts):
        sys.exit("expected a JSON array of strings on stdin")
    model = SentenceTransformer(os.environ.get("AUDIT_EMBEDDER_MODEL", "sentence-transformers/all-mpnet-base-v2"))
    vectors = model.encode(texts, batch_size=64, show_progress_bar=False)
    json.dump([[float(x) for x in v] for v in vectors], sys.stdout)


if __name__ == "__main__":
    main()
