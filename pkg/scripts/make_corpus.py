#!/usr/bin/env python3
"""Generate the synthetic byte corpora used by the toy experiments."""

import argparse

from speclab.corpus import write_corpus


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", required=True)
    parser.add_argument("--bytes", type=int, default=220_000)
    parser.add_argument("--seed", type=int, default=1234)
    args = parser.parse_args()
    write_corpus(args.out, args.bytes, args.seed)
    print(f"wrote {args.bytes} bytes to {args.out} (seed {args.seed})")


if __name__ == "__main__":
    main()
