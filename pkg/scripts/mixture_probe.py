#!/usr/bin/env python3
"""Train the toy two-style stack and sweep a style adapter's alpha.

Builds a base model plus <sty-a>/<sty-b> suffix adapters, then prints the
probe translation at each alpha so the mixing behavior is visible without
the HTTP service: alpha 0 is the base model, alpha 1 flips the marker.
"""

import argparse
import sys

import numpy as np

from loranmt.data import decode, encode
from loranmt.experiments import StyleSetupConfig, style_setup
from loranmt.mole import AdapterMixture, MixtureComponent, compose


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--style", default="style_a",
                        choices=("style_a", "style_b"))
    parser.add_argument("--alphas", default="-0.5,0,0.25,0.5,0.75,1")
    parser.add_argument("--save", help="also write base/vocab/adapters here")
    args = parser.parse_args()

    stack = style_setup(StyleSetupConfig(), out_dir=args.save)
    m, vocab = stack["model"], stack["vocab"]
    probe = stack["corpora"]["plain"]["test"].pairs[0][0]
    src = np.array(encode(vocab, probe, framed=False), dtype=np.int64)
    print(f"probe: {probe}")
    for alpha in (float(a) for a in args.alphas.split(",")):
        mix = AdapterMixture(
            [MixtureComponent(args.style, alpha=alpha, lam=1.0)],
            base_hash=m.content_hash())
        weights = compose(m, mix, stack["adapters"]) or None
        out = m.greedy_decode(src, max_len=m.cfg.max_len - 1,
                              overrides=weights)
        print(f"alpha {alpha:+.2f}: {decode(vocab, out)}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
