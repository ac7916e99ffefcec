"""Reference external scorer: ``score(q, i) = q + i / 1000``.

Run as ``python -m axn.echo_scorer``. Speaks the stdio JSON-lines
protocol; ``--version`` advertises a different protocol version and
``--die-after N`` exits abruptly after N score requests (both for tests).
"""

import argparse
import json
import sys


def send(obj):
    sys.stdout.write(json.dumps(obj) + "\n")
    sys.stdout.flush()


def main(argv=None):
    p = argparse.ArgumentParser(prog="axn-echo-scorer")
    p.add_argument("--version", type=int, default=1)
    p.add_argument("--die-after", type=int, default=None)
    args = p.parse_args(argv)

    served = 0
    for line in sys.stdin:
        line = line.strip()
        if not line:
            continue
        msg = json.loads(line)
        op = msg.get("op")
        if op == "hello":
            send({"op": "hello", "version": args.version, "name": "echo"})
        elif op == "score":
            if args.die_after is not None and served >= args.die_after:
                sys.exit(3)
            q = msg["query_id"]
            send({"op": "score", "scores": [q + i / 1000 for i in msg["item_ids"]]})
            served += 1
        elif op == "shutdown":
            return 0
        else:
            send({"op": "error", "message": f"unknown op {op!r}"})
    return 0


if __name__ == "__main__":
    sys.exit(main())
