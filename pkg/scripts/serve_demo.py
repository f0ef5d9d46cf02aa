#!/usr/bin/env python3
"""Train the toy two-style stack and serve it over HTTP.

One-command demo backend: builds the base model and two style adapters,
writes them under --workdir, then starts the service on loopback. Point the
UI (or curl) at it:

    curl localhost:8080/adapters
    curl -X PUT localhost:8080/mixture -H 'content-type: application/json' \
         -d '{"components": [{"id": "style_a", "alpha": 1.0, "lambda": 1.0}]}'
    curl -X POST localhost:8080/translate -H 'content-type: application/json' \
         -d '{"text": "w004 w011 w007"}'
"""

import argparse
import sys

import uvicorn

from loranmt.experiments import StyleSetupConfig, style_setup
from loranmt.service import ServiceState, create_app


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--workdir", default="runs/style_demo")
    parser.add_argument("--host", default="127.0.0.1")
    parser.add_argument("--port", type=int, default=8080)
    args = parser.parse_args()

    print("training the two-style stack (under a minute)...", file=sys.stderr)
    stack = style_setup(StyleSetupConfig(), out_dir=args.workdir)
    state = ServiceState(stack["model"], stack["vocab"],
                         dict(stack["adapters"]))
    probe = stack["corpora"]["plain"]["test"].pairs[0][0]
    print(f"ready; try POST /translate with text={probe!r}", file=sys.stderr)
    uvicorn.run(create_app(state), host=args.host, port=args.port,
                log_level="warning")
    return 0


if __name__ == "__main__":
    sys.exit(main())
