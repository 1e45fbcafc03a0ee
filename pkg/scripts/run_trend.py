"""Two-arm disentanglement trend run (N=6 vs N=1 heads) on generated toy data.

    python3 scripts/run_trend.py --work-dir runs/trend
    python3 scripts/run_trend.py --work-dir runs/quick --steps 300 --heads 6

Writes ``trend.json`` plus per-arm training logs and checkpoints under the
work directory. Data and the pretrained audio classifier are reused if present.
"""
import argparse
import json
import logging
from dataclasses import fields

from vst.experiment import TrendConfig, run_trend
from vst.seeding import set_deterministic


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    defaults = TrendConfig()
    for f in fields(TrendConfig):
        value = getattr(defaults, f.name)
        flag = "--" + f.name.replace("_", "-")
        if isinstance(value, tuple):
            ap.add_argument(flag, type=lambda s: tuple(int(v) for v in s.split(",")), default=value,
                            help="comma-separated, default %(default)s")
        else:
            ap.add_argument(flag, type=type(value), default=value, help="default %(default)s")
    ap.add_argument("--deterministic", action="store_true", help="single-threaded, bit-reproducible")
    args = vars(ap.parse_args())
    if args.pop("deterministic"):
        set_deterministic(True)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s")
    result = run_trend(TrendConfig(**args))
    print(json.dumps({k: v for k, v in result.items() if k != "config"}, indent=2))


if __name__ == "__main__":
    main()
