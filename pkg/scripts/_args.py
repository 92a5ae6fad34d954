"""Shared argument parsing for the experiment scripts."""
import argparse
import logging


def parser(description: str) -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(description=description)
    p.add_argument("--cache", default="runs/cache", help="checkpoint cache directory ('' disables caching)")
    p.add_argument("--seed", type=int, default=1, help="data seed")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def parse(p: argparse.ArgumentParser):
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    args.cache = args.cache or None
    return args
