import argparse
import logging
from pathlib import Path

from privshield.config import desk_config, load_config, with_overrides

ROOT = Path(__file__).resolve().parents[1]


def parser(description, default_out):
    p = argparse.ArgumentParser(description=description)
    p.add_argument("--config", type=Path, default=None, help="YAML/JSON config; defaults to the desk preset")
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--out", type=Path, default=ROOT / "runs" / default_out)
    return p


def config(args):
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    cfg = load_config(args.config) if args.config else desk_config()
    return with_overrides(cfg, eval={"seeds": args.seeds})


def verdict(ok):
    return "PASS" if ok else "FAIL"
