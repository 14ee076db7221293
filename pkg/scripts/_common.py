"""Shared helpers for the experiment scripts."""
from __future__ import annotations

import argparse
import json
from pathlib import Path

from slotground.config import parse_config

PRESETS = Path(__file__).resolve().parent / "presets"


def base_parser(description: str, preset: str) -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(description=description)
    ap.add_argument("--config", default=str(PRESETS / preset), help="config file (default: %(default)s)")
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
    ap.add_argument("--out", default=None, help="directory for the JSON report")
    return ap


def load(args):
    return parse_config(args.config, args.set)


def report(args, name: str, payload: dict) -> None:
    text = json.dumps(payload, indent=2, sort_keys=True, default=str)
    print(text)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / name).write_text(text + "\n")
