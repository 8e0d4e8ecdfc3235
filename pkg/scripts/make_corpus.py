#!/usr/bin/env python3
"""Generate the synthetic multi-domain corpus and write it to a file.

Labels (domain and mode per document) go to sibling .domains / .modes
files so clustering quality can be checked against ground truth.
"""

import argparse
from pathlib import Path

from expertmerge.config import RunConfig
from expertmerge.corpus import generate_corpus, write_corpus


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("out", help="output corpus file (one document per line)")
    parser.add_argument("--config", help="YAML run config; corpus section is used")
    parser.add_argument("--seed", type=int, help="override the corpus seed")
    args = parser.parse_args()

    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg = cfg.with_overrides({"corpus.seed": args.seed})

    docs, domains, modes = generate_corpus(cfg.corpus)
    out = Path(args.out)
    write_corpus(docs, out)
    out.with_suffix(out.suffix + ".domains").write_text(
        "\n".join(str(d) for d in domains) + "\n"
    )
    out.with_suffix(out.suffix + ".modes").write_text(
        "\n".join(str(m) for m in modes) + "\n"
    )
    print(f"wrote {len(docs)} documents to {out}")


if __name__ == "__main__":
    main()
