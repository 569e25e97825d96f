"""Run every stage on one config, then demonstrate the registry defense.

    python scripts/run_pipeline.py --out run [--config cfg.json]
"""

import argparse
import sys
from pathlib import Path

from advmed.cli import EXIT_OK, cmd_provenance, main


def run(out: Path, config: str | None) -> int:
    extra = ["--config", config] if config else []
    for stage in (["gen-data"], ["train"], ["train", "--role", "surrogate"], ["attack"]):
        code = main([*stage, "--out", str(out), *extra])
        if code != EXIT_OK:
            return code
    code = main(["report", "--out", str(out), *extra])
    registry = out / "provenance" / "registry.csv"
    if registry.exists():
        registry.unlink()
    clean = out / "attacks" / "Clean" / "images"
    print("\nregistering clean test images")
    cmd_provenance(registry, clean, "register")
    for cond in ("Clean", "PGD-White", "PGD-Black"):
        print(f"\nverifying {cond}")
        cmd_provenance(registry, out / "attacks" / cond / "images", "verify")
    return code


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="run")
    ap.add_argument("--config")
    args = ap.parse_args()
    sys.exit(run(Path(args.out), args.config))
