"""Shared argument handling for the demo scripts."""

import argparse

from ctxpool.harness import DESK_SCALE_ITEMS, FULL_SCALE_ITEMS


def parser(description):
    p = argparse.ArgumentParser(description=description)
    p.add_argument("--items", type=int, default=FULL_SCALE_ITEMS,
                   help=f"inference items to submit (default {FULL_SCALE_ITEMS}; try {DESK_SCALE_ITEMS} for a quick look)")
    p.add_argument("--plot", metavar="SVG", help="also write a figure")
    return p
