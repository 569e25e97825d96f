"""Batch pipeline: ``advmed {gen-data,train,attack,report,provenance}``.

Every stage reads and writes inside one run directory (``--out``)::

    data/      images/*.pgm, manifest.csv, train.csv, test.csv
    models/    victim.amf, surrogate.amf, <role>_log.json
    attacks/   <condition>/images/*.pgm + manifest.csv + manifest.json, patches/*.amf
    report/    report.csv, report.txt

Each stage directory also gets a ``run_metadata.json`` with the resolved
config, seeds and input digests.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from advmed import attacks as A
from advmed import container, data
from advmed.classifier import load_model, predict, save_model, train
from advmed.config import ConfigError, RunConfig, load_config
from advmed.data import Dataset, LabeledImage
from advmed.metrics import CONDITIONS, EvaluationReport, build_report, evaluate
from advmed.provenance import DuplicateImageError, HashRegistry, Status

log = logging.getLogger("advmed")

EXIT_OK, EXIT_VALIDATION, EXIT_THRESHOLD, EXIT_IO = 0, 1, 2, 3
ATTACK_CONDITIONS = CONDITIONS[1:]


class ThresholdFailure(RuntimeError):
    def __init__(self, failures: list[str]):
        super().__init__("; ".join(failures))
        self.failures = failures


# ---------------------------------------------------------------------------
# helpers


def _digest_files(paths) -> str:
    h = hashlib.sha256()
    for p in sorted(Path(x) for x in paths):
        h.update(p.name.encode())
        h.update(hashlib.sha256(p.read_bytes()).digest())
    return h.hexdigest()


def _write_metadata(directory: Path, stage: str, cfg: RunConfig, **extra) -> None:
    meta = {"stage": stage, "config": cfg.to_dict(), **extra}
    (directory / "run_metadata.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _subset(ds: Dataset, rows: list[dict], split: str) -> Dataset:
    by_id = {im.image_id: im for im in ds.images}
    return Dataset(tuple(by_id[r["image_id"]] for r in rows), split, ds.root)


def load_splits(run: Path) -> tuple[Dataset, Dataset]:
    root = run / "data"
    full = data.load_manifest(root / "manifest.csv")
    train_rows = data.read_manifest(root / "train.csv")
    test_rows = data.read_manifest(root / "test.csv")
    return _subset(full, train_rows, "train"), _subset(full, test_rows, "test")


def snap_to_ball(adv: np.ndarray, anchor: np.ndarray, epsilon: float) -> np.ndarray:
    """Nearest 8-bit grid point to ``adv`` that stays inside the ball around an on-grid ``anchor``."""
    a = np.rint(anchor * 255.0)
    k = np.floor(epsilon * 255.0 + 1e-9)
    d = np.clip(np.rint((adv - anchor) * 255.0), -k, k)
    return np.clip(a + d, 0.0, 255.0) / 255.0


# ---------------------------------------------------------------------------
# stages


def cmd_gen_data(cfg: RunConfig, run: Path) -> dict:
    d = cfg.data
    out = run / "data"
    if d.source == "synthetic":
        ds = data.generate_synthetic(d.n_patients, d.images_per_patient, d.seed)
    else:
        ds = data.load_manifest(Path(d.directory) / "manifest.csv")
        ds = Dataset(tuple(replace(im, path=im.path or f"images/{im.image_id}.pgm") for im in ds.images))
    written = data.write_dataset(out, ds)
    tr, te = data.split_by_patient(written, d.test_fraction, d.seed)
    data.save_manifest(out / "train.csv", tr)
    data.save_manifest(out / "test.csv", te)
    summary = {
        "split_probability": f"{1 - d.test_fraction:.2f}/{d.test_fraction:.2f}",
        "patients": {"train": len(tr.patients), "test": len(te.patients)},
        "images": {
            name: {"total": len(s), "healthy": int((s.y == 0).sum()), "diseased": int((s.y == 1).sum())}
            for name, s in (("train", tr), ("test", te))
        },
    }
    _write_metadata(out, "gen-data", cfg, seeds={"data": d.seed}, summary=summary)
    print(f"patient split train/test with probability {summary['split_probability']}")
    for name in ("train", "test"):
        s = summary["images"][name]
        print(f"{name}: {s['total']} images ({s['healthy']} healthy, {s['diseased']} diseased), "
              f"{summary['patients'][name]} patients")
    return summary


def cmd_train(cfg: RunConfig, run: Path, role: str) -> str:
    if role not in ("victim", "surrogate"):
        raise ConfigError(f"--role must be victim or surrogate, got {role!r}")
    tr, te = load_splits(run)
    tc = cfg.train_config(role)
    model = train(tr, tc, eval_set=te)
    clean = evaluate(predict(model, te.x), te.y)
    model.metadata["role"] = role
    model.metadata["clean_test"] = clean
    out = run / "models"
    digest = save_model(model, out / f"{role}.amf")
    log_doc = {"role": role, "seed": tc.seed, "history": model.metadata["history"], "clean_test": clean}
    (out / f"{role}_log.json").write_text(json.dumps(log_doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    _write_metadata(out, "train", cfg, seeds={role: tc.seed},
                    inputs={"data": _digest_files((run / "data").glob("*.csv"))},
                    checkpoints={p.stem: container.file_digest(p) for p in sorted(out.glob("*.amf"))})
    print(f"{role}: seed {tc.seed}, clean test accuracy {clean['accuracy']:.4f}, AUROC {clean['auroc']:.4f}")
    print(f"checkpoint sha256 {digest}")
    return digest


def _emit(dest: Path, condition: str, images: list[LabeledImage], adv: np.ndarray, extra: dict) -> None:
    rows = []
    for im, px in zip(images, adv):
        rel = f"images/{im.image_id}.pgm"
        data.save_image(dest / rel, px)
        rows.append(replace(im, pixels=np.clip(px, 0, 1), path=rel))
    data.save_manifest(dest / "manifest.csv", Dataset(tuple(rows)))
    doc = [
        {"image_id": im.image_id, "source": im.path, "label": im.label, "condition": condition, **extra}
        for im in images
    ]
    (dest / "manifest.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _save_patch(path: Path, patch: A.Patch, meta: dict) -> str:
    desc = {"kind": "patch", "shape": list(patch.pixels.shape)}
    return container.write(path, desc, [patch.pixels],
                           {"target": patch.target, "scale": patch.scale, **patch.metadata, **meta})


def audit_ball(anchor: np.ndarray, adv: np.ndarray, epsilon: float) -> None:
    dev = np.abs(adv - anchor).max() if adv.size else 0.0
    if dev > epsilon + 1e-12 or adv.min(initial=0) < 0 or adv.max(initial=1) > 1:
        raise A.AttackError(f"ball violation: max deviation {dev} > epsilon {epsilon}")


def cmd_attack(cfg: RunConfig, run: Path) -> list[str]:
    models = run / "models"
    for role in ("victim", "surrogate"):
        if not (models / f"{role}.amf").is_file():
            raise FileNotFoundError(f"missing checkpoint {models / f'{role}.amf'}")
    victim = load_model(models / "victim.amf")
    surrogate = load_model(models / "surrogate.amf")
    digests = {r: container.file_digest(models / f"{r}.amf") for r in ("victim", "surrogate")}
    tr, te = load_splits(run)
    x, y = te.x, te.y
    images = list(te.images)
    out = run / "attacks"
    pgd = cfg.pgd_config()
    eps = pgd.ball.epsilon
    pgd_meta = {"epsilon": eps, "iterations": pgd.iterations, "step_size": pgd.step, "seed": pgd.seed}

    _emit(out / "Clean", "Clean", images, x, {"seed": cfg.data.seed})

    for cond, model in (("PGD-White", victim), ("PGD-Black", surrogate)):
        adv = snap_to_ball(A.pgd_batch(model, x, y, pgd), x, eps)
        audit_ball(x, adv, eps)
        _emit(out / cond, cond, images, adv, {**pgd_meta, "crafted_on": "victim" if model is victim else "surrogate"})
        log.info("%s written", cond)

    pc = cfg.patch_config()
    patch_sets = {
        "Patch-Natural": ({t: A.natural_patch(victim, tr, t, pc.scale) for t in (0, 1)}, "victim"),
        "Patch-White": ({t: A.train_patch(victim, tr, t, pc) for t in (0, 1)}, "victim"),
        "Patch-Black": ({t: A.train_patch(surrogate, tr, t, pc) for t in (0, 1)}, "surrogate"),
    }
    for cond in ("Patch-Natural", "Patch-White", "Patch-Black"):
        patches, crafted_on = patch_sets[cond]
        for t, patch in patches.items():
            _save_patch(out / "patches" / f"{cond}_target{t}.amf", patch,
                        {"seed": pc.seed, "crafted_on": crafted_on,
                         "victim_sha256": digests["victim"], "surrogate_sha256": digests["surrogate"]})
        adv = A.apply_patches(x, y, patches, pc.seed)
        _emit(out / cond, cond, images, adv, {"scale": pc.scale, "seed": pc.seed, "crafted_on": crafted_on})
        log.info("%s written", cond)

    _write_metadata(out, "attack", cfg, seeds={"attack": cfg.attack.seed},
                    inputs={**digests, "test": _digest_files([run / "data" / "test.csv"])})
    print("wrote conditions: " + ", ".join(CONDITIONS))
    return list(CONDITIONS)


def evaluate_directories(victim, attack_root: Path) -> dict[str, dict]:
    metrics = {}
    for cond in CONDITIONS:
        manifest = attack_root / cond / "manifest.csv"
        if not manifest.is_file():
            log.warning("condition %s missing under %s", cond, attack_root)
            continue
        ds = data.load_manifest(manifest)
        metrics[cond] = evaluate(predict(victim, ds.x), ds.y)
    return metrics


def check_thresholds(report: EvaluationReport, th) -> list[str]:
    rows = {r.condition: r for r in report.rows}
    fails = []

    def need(cond, ok, what):
        if cond in rows and not ok(rows[cond]):
            fails.append(f"{cond}: {what}")

    need("Clean", lambda r: r.accuracy >= th.clean_accuracy_min, f"accuracy < {th.clean_accuracy_min}")
    need("Clean", lambda r: r.auroc >= th.clean_auroc_min, f"auroc < {th.clean_auroc_min}")
    need("PGD-White", lambda r: r.accuracy <= th.pgd_white_accuracy_max, f"accuracy > {th.pgd_white_accuracy_max}")
    need("PGD-White", lambda r: r.auroc <= th.pgd_white_auroc_max, f"auroc > {th.pgd_white_auroc_max}")
    need("PGD-White", lambda r: r.avg_confidence >= th.pgd_white_confidence_min,
         f"avg_confidence < {th.pgd_white_confidence_min}")
    clean_acc = rows["Clean"].accuracy
    need("PGD-Black", lambda r: r.accuracy <= th.pgd_black_accuracy_ratio_max * clean_acc,
         f"accuracy > {th.pgd_black_accuracy_ratio_max} x clean accuracy")
    need("PGD-Black", lambda r: r.auroc <= th.pgd_black_auroc_max, f"auroc > {th.pgd_black_auroc_max}")
    need("Patch-White", lambda r: r.accuracy <= th.patch_white_accuracy_max, f"accuracy > {th.patch_white_accuracy_max}")
    need("Patch-White", lambda r: r.auroc <= th.patch_white_auroc_max, f"auroc > {th.patch_white_auroc_max}")
    need("Patch-Natural", lambda r: th.natural_auroc_min <= r.auroc <= th.natural_auroc_max,
         f"auroc outside [{th.natural_auroc_min}, {th.natural_auroc_max}]")
    if th.patch_ordering and all(c in rows for c in ("Patch-Natural", "Patch-White", "Patch-Black")):
        nat, wb, bb = rows["Patch-Natural"].accuracy, rows["Patch-White"].accuracy, rows["Patch-Black"].accuracy
        if not nat > bb > wb:
            fails.append(f"patch ordering: need natural {nat} > black {bb} > white {wb}")
    return fails


def cmd_report(cfg: RunConfig, run: Path) -> EvaluationReport:
    victim_path = run / "models" / "victim.amf"
    if not victim_path.is_file():
        raise FileNotFoundError(f"missing checkpoint {victim_path}")
    victim = load_model(victim_path)
    attack_root = run / "attacks"
    metrics = evaluate_directories(victim, attack_root)
    if "Clean" not in metrics:
        raise FileNotFoundError(f"clean baseline missing under {attack_root}")
    inputs = {cond: _digest_files((attack_root / cond / "images").glob("*.pgm")) for cond in metrics}
    meta = {"victim_sha256": container.file_digest(victim_path), "inputs": inputs}
    report = build_report(metrics, meta)
    out = run / "report"
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.csv").write_text(report.to_csv(), encoding="utf-8", newline="\n")
    table = report.render()
    (out / "report.txt").write_text(table, encoding="utf-8", newline="\n")
    _write_metadata(out, "report", cfg, seeds={"attack": cfg.attack.seed, "data": cfg.data.seed}, **meta)
    sys.stdout.write(table)
    sys.stdout.flush()
    fails = check_thresholds(report, cfg.report.thresholds)
    if fails:
        raise ThresholdFailure(fails)
    return report


def cmd_provenance(registry_path: Path, directory: Path, mode: str) -> dict[str, int]:
    if mode not in ("register", "verify"):
        raise ConfigError(f"--mode must be register or verify, got {mode!r}")
    if not directory.is_dir():
        raise FileNotFoundError(f"image directory {directory} does not exist")
    registry = HashRegistry(registry_path)
    counts: dict[str, int] = {}
    files = sorted(p for p in directory.rglob("*") if p.suffix.lower() in (".pgm", ".ppm"))
    for f in files:
        rel = f.relative_to(directory)
        try:
            raw = f.read_bytes()
            data.decode_image(raw)
        except (OSError, data.FormatError) as exc:
            status = "unreadable"
            print(f"{rel}\t{status}\t{exc}")
        else:
            if mode == "register":
                try:
                    registry.register(f.stem, raw, source=str(rel))
                    status = "registered"
                except DuplicateImageError:
                    status = "duplicate"
            else:
                status = registry.verify(f.stem, raw).value
            print(f"{rel}\t{status}")
        counts[status] = counts.get(status, 0) + 1
    print("summary: " + ", ".join(f"{k}={v}" for k, v in sorted(counts.items())))
    return counts


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="store_true", help="log progress at INFO level")
    p = argparse.ArgumentParser(prog="advmed", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("gen-data", "train", "attack", "report"):
        sp = sub.add_parser(name, parents=[common])
        sp.add_argument("--config", help="run config JSON (defaults apply when omitted)")
        sp.add_argument("--out", help="run directory (default: report.output_dir)")
        if name == "train":
            sp.add_argument("--role", choices=["victim", "surrogate"], default="victim")
    sp = sub.add_parser("provenance", parents=[common])
    sp.add_argument("--mode", choices=["register", "verify"], required=True)
    sp.add_argument("--registry", required=True, help="registry CSV path")
    sp.add_argument("--dir", required=True, help="directory of PGM/PPM files")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "provenance":
            cmd_provenance(Path(args.registry), Path(args.dir), args.mode)
            return EXIT_OK
        cfg = load_config(args.config)
        run = Path(args.out or cfg.report.output_dir)
        if args.command == "gen-data":
            cmd_gen_data(cfg, run)
        elif args.command == "train":
            cmd_train(cfg, run, args.role)
        elif args.command == "attack":
            cmd_attack(cfg, run)
        elif args.command == "report":
            cmd_report(cfg, run)
    except ThresholdFailure as exc:
        print("acceptance thresholds not met:", file=sys.stderr)
        for f in exc.failures:
            print(f"  {f}", file=sys.stderr)
        return EXIT_THRESHOLD
    except (OSError, container.ContainerError, data.FormatError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
