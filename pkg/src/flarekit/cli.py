"""Command-line entry point: ``flarekit <subcommand> ...``.

Exit codes: 0 success, 2 invalid input or configuration, 3 processing failure.
Progress goes to standard error; results go only to files under ``--out``.
Every command writes a JSON run record next to its outputs.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import math
import os
import platform
import sys
from concurrent.futures import ProcessPoolExecutor
from importlib import metadata
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import kernels, rawio
from .dataset import (PATCH_SIZES, BuiltPair, DatasetManifest, PairRecord, build_reflective_pairs,
                      build_scattering_pairs, manifest_read, manifest_write, write_pair)
from .errors import FlareKitError
from .experiments import (ABLATION_PARAMS, AblationSettings, ordering_rows, pairs_from_records,
                          run_ablation, table_rows, write_report)
from .isp import PipelineConfig, run_frontend, run_pipeline
from .metrics import psnr, ssim
from .registration import estimate_homography, estimate_translation
from .removal import REMOVER_KINDS, BaselineParams, FlareRemover
from .synthetic import make_reflective_capture, make_scattering_capture

log = logging.getLogger("flarekit")

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_FAILED = 3

CAPTURE_MANIFEST = "manifest.jsonl"
PAIR_MANIFEST = "manifest.jsonl"
RUN_RECORD = "run_record.json"
DEFAULT_NOISE = {"scattering": 0.02, "reflective": 0.0}
METRICS = {"psnr": psnr, "ssim": ssim}


class UsageError(FlareKitError, ValueError):
    """Bad flags, missing inputs or unreadable config files."""


# ------------------------------------------------------------- run records

def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _version(dist: str) -> str | None:
    try:
        return metadata.version(dist)
    except metadata.PackageNotFoundError:
        return None


def versions() -> dict[str, Any]:
    import cv2
    import PIL
    import scipy

    return {"flarekit": _version("flarekit"), "python": platform.python_version(),
            "numpy": np.__version__, "scipy": scipy.__version__, "pillow": PIL.__version__,
            "opencv": cv2.__version__, "kernels": kernels.BACKEND}


def _jsonable(v):
    if isinstance(v, Path):
        return str(v)
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, dict):
        return {k: _jsonable(x) for k, x in v.items()}
    return v


def write_run_record(path, command: str, args: argparse.Namespace, seed: int | None,
                     inputs: Sequence, outputs_root=None, outputs: Sequence = ()) -> Path:
    """JSON record of one invocation: flags, versions, seed and input/output digests."""
    path = Path(path)
    flags = {k: _jsonable(v) for k, v in sorted(vars(args).items()) if k not in ("func",)}
    rec: dict[str, Any] = {
        "command": command,
        "flags": flags,
        "seed": seed,
        "versions": versions(),
        "inputs": {str(p): file_digest(p) for p in sorted({str(p) for p in inputs})},
    }
    if outputs_root is not None:
        root = Path(outputs_root)
        rec["outputs"] = {Path(p).relative_to(root).as_posix(): file_digest(p)
                          for p in sorted(outputs, key=str)}
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(rec, indent=2, sort_keys=True) + "\n")
    return path


def _tree_files(root: Path, exclude: Sequence[Path] = ()) -> list[Path]:
    skip = {Path(p).resolve() for p in exclude}
    return sorted(p for p in root.rglob("*") if p.is_file() and p.resolve() not in skip)


def _read_json(path, what: str) -> dict:
    path = Path(path)
    if not path.exists():
        raise UsageError(f"{what} {path} does not exist")
    try:
        obj = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"{what} {path} is not valid JSON: {exc}") from exc
    if not isinstance(obj, dict):
        raise UsageError(f"{what} {path} must hold a JSON object")
    return obj


def _out_dir(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create output directory {out}: {exc}") from exc
    if not os.access(out, os.W_OK):
        raise UsageError(f"output directory {out} is not writable")
    return out


def _progress(done: int, total: int, label: str) -> None:
    log.info("[%d/%d] %s", done, total, label)


def _map(fn, tasks: list, jobs: int):
    """Ordered map, in worker processes when ``jobs > 1``."""
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            yield from pool.map(fn, tasks)
    else:
        for t in tasks:
            yield fn(t)


# ------------------------------------------------------------------- synth

def capture_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0] & 0x7FFFFFFF)


def _synth_one(task) -> dict[str, Any]:
    kind, index, seed, out, severity, noise, size = task
    cid = f"{kind[:4]}{index:04d}"
    d = Path(out) / kind / cid
    files: dict[str, str] = {}

    def put(role, ext, writer, data):
        p = d / f"{role}.{ext}"
        writer(p, data)
        files[role] = p.relative_to(out).as_posix()

    s = capture_seed(seed, index)
    rec: dict[str, Any] = {"capture_id": cid, "kind": kind, "seed": s, "device_tag": "synthetic"}
    if kind == "scattering":
        cap = make_scattering_capture(s, size=size, severity=severity, noise_sigma=noise)
        put("raw_corrupted", "pgm", rawio.write_raw, cap.raw_corrupted)
        put("raw_clean", "pgm", rawio.write_raw, cap.raw_clean)
        put("flare_layer", "npy", rawio.write_linear, cap.flare_layer)
        put("rgb_corrupted", "png", rawio.write_png, run_frontend(cap.raw_corrupted))
        put("rgb_clean", "png", rawio.write_png, run_frontend(cap.raw_clean))
        rec.update(severity=severity, shift=list(cap.shift))
    else:
        cap = make_reflective_capture(s, size=size, noise_sigma=noise)
        put("raw_a", "pgm", rawio.write_raw, cap.raw_a)
        put("raw_b", "pgm", rawio.write_raw, cap.raw_b)
        put("flare_layer_a", "npy", rawio.write_linear, cap.flare_a)
        put("flare_layer_b", "npy", rawio.write_linear, cap.flare_b)
        put("rgb_a", "png", rawio.write_png, run_frontend(cap.raw_a))
        put("rgb_b", "png", rawio.write_png, run_frontend(cap.raw_b))
        rec.update(optical_center=list(cap.optical_center), view_b=cap.view_b.tolist())
    rec.update(scene_tag=cap.scene_tag, noise_sigma=noise, files=dict(sorted(files.items())),
               scene=cap.scene.to_dict(), flare=cap.spec.to_dict())
    return rec


def write_capture_manifest(path, records: Sequence[dict]) -> Path:
    lines = [json.dumps(_jsonable(r), sort_keys=True)
             for r in sorted(records, key=lambda r: r["capture_id"])]
    Path(path).write_text("".join(line + "\n" for line in lines))
    return Path(path)


def read_capture_manifest(path) -> list[dict]:
    path = Path(path)
    if not path.exists():
        raise UsageError(f"capture manifest {path} does not exist")
    out = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise UsageError(f"{path}:{lineno}: invalid JSON: {exc.msg}") from exc
        for key in ("capture_id", "kind", "scene_tag", "files"):
            if key not in obj:
                raise UsageError(f"{path}:{lineno}: capture record lacks {key!r}")
        out.append(obj)
    return out


def cmd_synth(args) -> int:
    if args.count < 0:
        raise UsageError("--count must be >= 0")
    out = _out_dir(args.out)
    noise = DEFAULT_NOISE[args.kind] if args.noise is None else args.noise
    size = args.size or (640 if args.kind == "scattering" else PATCH_SIZES["reflective"])
    tasks = [(args.kind, i, args.seed, out, args.severity, noise, size) for i in range(args.count)]
    records = []
    for i, rec in enumerate(_map(_synth_one, tasks, args.jobs)):
        records.append(rec)
        _progress(i + 1, len(tasks), rec["capture_id"])
    manifest = write_capture_manifest(out / CAPTURE_MANIFEST, records)
    produced = _tree_files(out, exclude=[out / RUN_RECORD])
    write_run_record(out / RUN_RECORD, "synth", args, args.seed, [], out, produced)
    log.info("wrote %d %s captures to %s", len(records), args.kind, manifest)
    return EXIT_OK


# --------------------------------------------------------------------- isp

def cmd_isp(args) -> int:
    raw = rawio.read_raw(args.raw)
    inputs = [args.raw, rawio.sidecar_path(args.raw)]
    config = PipelineConfig()
    if args.config:
        config = PipelineConfig.from_dict(_read_json(args.config, "config"))
        inputs.append(args.config)
    remover = None
    if args.remover:
        remover = FlareRemover(args.remover)
        if args.remover == "oracle":
            if not args.flare_layer:
                raise UsageError("--remover oracle needs --flare-layer")
            remover = remover.with_truth(rawio.read_linear(args.flare_layer))
            inputs.append(args.flare_layer)
    elif config.needs_remover:
        raise UsageError("the config contains flare_removal; pass --remover")
    img, trace = run_pipeline(raw, config, remover)
    out = Path(args.out)
    _out_dir(out.parent)
    rawio.write_png(out, img)
    trace_path = out.with_suffix(".trace.json")
    trace_path.write_text(trace.to_json() + "\n")
    write_run_record(out.with_suffix(".run.json"), "isp", args, None, inputs, out.parent,
                     [out, trace_path])
    log.info("stages: %s", " -> ".join(trace.stages))
    return EXIT_OK


# ---------------------------------------------------------------- register

def cmd_register(args) -> int:
    ref = rawio.read_image(args.reference)
    mov = rawio.read_image(args.moving)
    if args.model == "translation":
        result = estimate_translation(ref, mov, search=args.search).to_dict()
    else:
        result = estimate_homography(ref, mov).to_dict()
    out = Path(args.out)
    _out_dir(out.parent)
    out.write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")
    write_run_record(out.with_suffix(".run.json"), "register", args, None,
                     [args.reference, args.moving], out.parent, [out])
    return EXIT_OK


# ------------------------------------------------------------------- build

def _failed_records(cap: dict, reason: str) -> list[PairRecord]:
    kind = cap["kind"]
    ids = [f"{cap['capture_id']}-s00"] if kind == "scattering" else \
        [f"{cap['capture_id']}-a", f"{cap['capture_id']}-b"]
    return [PairRecord(pid, kind, cap["scene_tag"], cap.get("device_tag", ""), PATCH_SIZES[kind],
                       accepted=False, reject_reason=reason) for pid in ids]


def _build_one(task) -> tuple[list[dict], str | None]:
    cap, capture_dir, out, max_patches = task
    root = Path(capture_dir)
    f = {role: root / p for role, p in cap["files"].items()}
    # optional precomputed mask, nonzero where bright background should be ignored
    mask = rawio.read_image(f["background_mask"]).any(axis=-1) if "background_mask" in f else None
    try:
        if cap["kind"] == "scattering":
            truth = rawio.read_linear(f["flare_layer"]) if "flare_layer" in f else None
            built: list[BuiltPair] = build_scattering_pairs(
                rawio.read_raw(f["raw_corrupted"]), rawio.read_raw(f["raw_clean"]),
                cap["capture_id"], cap["scene_tag"], cap.get("device_tag", ""),
                truth_flare_layer=truth, max_patches=max_patches, background_mask=mask)
        else:
            raw_a, raw_b = rawio.read_raw(f["raw_a"]), rawio.read_raw(f["raw_b"])
            center = cap.get("optical_center")
            built = list(build_reflective_pairs(
                run_frontend(raw_a), run_frontend(raw_b), raw_a, raw_b, cap["capture_id"],
                cap["scene_tag"], cap.get("device_tag", ""),
                optical_center=tuple(center) if center else None, background_mask=mask))
    except FlareKitError as exc:
        if isinstance(exc, ValueError):
            raise UsageError(f"capture {cap['capture_id']}: {exc}") from exc
        note = f"{cap['capture_id']}: {type(exc).__name__}: {exc}"
        return [r.to_dict() for r in _failed_records(cap, "registration_failed")], note
    return [write_pair(out, b).to_dict() for b in built], None


def cmd_build(args) -> int:
    capture_dir = Path(args.capture_dir)
    manifest_path = capture_dir / CAPTURE_MANIFEST
    captures = [c for c in read_capture_manifest(manifest_path) if c["kind"] == args.kind]
    out = _out_dir(args.out)
    tasks = [(c, capture_dir, out, args.max_patches)
             for c in sorted(captures, key=lambda c: c["capture_id"])]
    records: list[PairRecord] = []
    for i, (recs, note) in enumerate(_map(_build_one, tasks, args.jobs)):
        cid = tasks[i][0]["capture_id"]
        if note:
            log.warning("capture %s rejected: %s", cid, note)
        records.extend(PairRecord.from_dict(r) for r in recs)
        _progress(i + 1, len(tasks), f"{cid}: {sum(r['accepted'] for r in recs)}/{len(recs)} accepted")
    manifest = DatasetManifest(records)
    mpath = manifest_write(out / PAIR_MANIFEST, manifest)
    inputs = [manifest_path] + [capture_dir / p for c in captures for p in c["files"].values()]
    produced = _tree_files(out, exclude=[out / RUN_RECORD])
    write_run_record(out / RUN_RECORD, "build", args, None, inputs, out, produced)
    stats = manifest.stats
    log.info("%d pairs, %d accepted, %d rejected -> %s", len(records),
             stats["total"]["total"], stats["rejected"], mpath)
    return EXIT_OK


# ------------------------------------------------------------------ ablate

def _parse_orderings(text: str | None) -> list[int] | None:
    if text is None:
        return None
    try:
        ids = [int(t) for t in text.split(",") if t.strip()]
    except ValueError as exc:
        raise UsageError(f"--orderings must be comma-separated integers, got {text!r}") from exc
    if not ids:
        raise UsageError("--orderings is empty")
    return ids


def ablation_config(args) -> dict[str, Any]:
    """Defaults, then the config file, then explicit flags."""
    cfg: dict[str, Any] = {"manifest": None, "orderings": None, "remover": "baseline",
                           "params": dict(ABLATION_PARAMS), "baseline": {}, "seed": 0,
                           "augment": False, "limit": None}
    if args.config:
        file_cfg = _read_json(args.config, "experiment config")
        unknown = set(file_cfg) - set(cfg)
        if unknown:
            raise UsageError(f"unknown experiment config keys {sorted(unknown)}")
        base = Path(args.config).parent
        if file_cfg.get("manifest"):
            file_cfg["manifest"] = str(base / file_cfg["manifest"])
        params = dict(cfg["params"])
        params.update(file_cfg.pop("params", {}) or {})
        cfg.update(file_cfg)
        cfg["params"] = params
    for key, flag in (("manifest", args.manifest), ("remover", args.remover), ("seed", args.seed),
                      ("limit", args.limit)):
        if flag is not None:
            cfg[key] = flag
    if args.orderings is not None:
        cfg["orderings"] = _parse_orderings(args.orderings)
    if args.augment:
        cfg["augment"] = True
    if not cfg["manifest"]:
        raise UsageError("no manifest given (use --manifest or the config file)")
    if cfg["remover"] not in REMOVER_KINDS:
        raise UsageError(f"unknown remover {cfg['remover']!r}; choose from {REMOVER_KINDS}")
    unknown = set(cfg["params"]) - set(ABLATION_PARAMS)
    if unknown:
        raise UsageError(f"unknown stage parameters {sorted(unknown)}")
    return cfg


def cmd_ablate(args) -> int:
    cfg = ablation_config(args)
    manifest_path = Path(cfg["manifest"])
    if not manifest_path.exists():
        raise UsageError(f"manifest {manifest_path} does not exist")
    manifest = manifest_read(manifest_path)
    rows = ordering_rows(cfg["orderings"]) if cfg["orderings"] else table_rows()
    PipelineConfig(**cfg["params"])  # validate stage parameters up front
    settings = AblationSettings(tuple(rows), cfg["remover"], BaselineParams(**cfg["baseline"]),
                                tuple(sorted(cfg["params"].items())), int(cfg["seed"]),
                                bool(cfg["augment"]))
    pairs = pairs_from_records(manifest.records, manifest_path.parent)
    if cfg["limit"] is not None:
        pairs = pairs[:int(cfg["limit"])]
    if not pairs:
        raise UsageError(f"manifest {manifest_path} has no accepted pairs")
    out = _out_dir(args.out)
    log.info("ablation: %d pairs x %d rows, remover=%s", len(pairs), len(rows), settings.remover)
    report = run_ablation(pairs, settings, jobs=args.jobs, progress=_progress)
    text_path, csv_path = write_report(out, report)
    (out / "experiment.json").write_text(json.dumps(_jsonable(cfg), indent=2, sort_keys=True) + "\n")
    inputs = [manifest_path] + [p for pair in pairs for p in
                                (pair.raw_corrupted, pair.raw_reference, pair.flare_layer) if p]
    write_run_record(out / RUN_RECORD, "ablate", args, int(cfg["seed"]), inputs, out,
                     [text_path, csv_path, out / "experiment.json"])
    sys.stderr.write(text_path.read_text(encoding="utf-8"))
    return EXIT_OK


# -------------------------------------------------------------------- eval

def read_pair_list(path) -> list[tuple[Path, Path]]:
    """Two paths per line, comma or whitespace separated, relative to the list file."""
    path = Path(path)
    if not path.exists():
        raise UsageError(f"pair list {path} does not exist")
    base = path.parent
    pairs = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = [p for p in line.replace(",", " ").split() if p]
        if len(parts) != 2:
            raise UsageError(f"{path}:{lineno}: expected two paths, got {len(parts)}")
        pairs.append((base / parts[0], base / parts[1]))
    return pairs


def _fmt_metric(v: float) -> str:
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return f"{v:.6f}"


def cmd_eval(args) -> int:
    names = [m.strip() for m in args.metrics.split(",") if m.strip()]
    for m in names:
        if m not in METRICS:
            raise UsageError(f"unknown metric {m!r}; choose from {sorted(METRICS)}")
    pairs = read_pair_list(args.pairs)
    out = Path(args.out)
    _out_dir(out.parent)
    rows = []
    for i, (a, b) in enumerate(pairs):
        for p in (a, b):
            if not p.exists():
                raise UsageError(f"image {p} does not exist")
        ia, ib = rawio.read_image(a), rawio.read_image(b)
        rows.append([a.as_posix(), b.as_posix()] + [_fmt_metric(METRICS[m](ia, ib)) for m in names])
        _progress(i + 1, len(pairs), a.name)
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["a", "b"] + names)
        w.writerows(rows)
    write_run_record(out.with_suffix(".run.json"), "eval", args, None,
                     [args.pairs] + [p for ab in pairs for p in ab], out.parent, [out])
    return EXIT_OK


# ------------------------------------------------------------------ parser

def _default_jobs() -> int:
    try:
        return max(1, int(os.environ.get("FLAREKIT_JOBS", "1")))
    except ValueError:
        return 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="flarekit", description=__doc__.splitlines()[0])
    p.add_argument("--jobs", type=int, default=_default_jobs(),
                   help="worker processes (default: $FLAREKIT_JOBS or 1)")
    p.add_argument("--quiet", action="store_true", help="only report warnings and errors")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate synthetic flare captures")
    s.add_argument("--kind", choices=("scattering", "reflective"), required=True)
    s.add_argument("--count", type=int, required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--severity", choices=("local", "global"), default="local")
    s.add_argument("--noise", type=float, default=None,
                   help="sensor noise sigma (default 0.02 scattering, 0 reflective)")
    s.add_argument("--size", type=int, default=None, help="capture side length in pixels")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("isp", help="render a raw file through the pipeline")
    s.add_argument("--raw", required=True)
    s.add_argument("--config", help="JSON pipeline config (empty: front-end only)")
    s.add_argument("--remover", choices=REMOVER_KINDS)
    s.add_argument("--flare-layer", help="linear .npy flare layer for the oracle remover")
    s.add_argument("--out", required=True, help="output PNG")
    s.set_defaults(func=cmd_isp)

    s = sub.add_parser("register", help="estimate the motion between two images")
    s.add_argument("--reference", required=True)
    s.add_argument("--moving", required=True)
    s.add_argument("--model", choices=("translation", "homography"), default="translation")
    s.add_argument("--search", type=int, default=32)
    s.add_argument("--out", required=True, help="output JSON")
    s.set_defaults(func=cmd_register)

    s = sub.add_parser("build", help="build paired patches from captures")
    s.add_argument("--capture-dir", required=True)
    s.add_argument("--kind", choices=("scattering", "reflective"), required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--max-patches", type=int, default=4)
    s.set_defaults(func=cmd_build)

    s = sub.add_parser("ablate", help="run the stage-ordering study on a pair manifest")
    s.add_argument("--manifest")
    s.add_argument("--orderings", help="comma-separated ordering ids (default: table rows)")
    s.add_argument("--remover", choices=REMOVER_KINDS)
    s.add_argument("--config", help="JSON experiment config")
    s.add_argument("--seed", type=int)
    s.add_argument("--limit", type=int, help="evaluate only the first N accepted pairs")
    s.add_argument("--augment", action="store_true",
                   help="randomize sharpen amount and JPEG quality per pair")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("eval", help="score image pairs with full-reference metrics")
    s.add_argument("--pairs", required=True)
    s.add_argument("--metrics", default="psnr,ssim")
    s.add_argument("--out", required=True, help="output CSV")
    s.set_defaults(func=cmd_eval)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="flarekit: %(message)s", stream=sys.stderr, force=True)
    if args.jobs < 1:
        parser.error("--jobs must be >= 1")
    try:
        return args.func(args)
    except (UsageError, ValueError, FileNotFoundError) as exc:
        log.error("error: %s", exc)
        return EXIT_INVALID
    except FlareKitError as exc:
        log.error("failed: %s: %s", type(exc).__name__, exc)
        return EXIT_FAILED
    except OSError as exc:
        log.error("I/O failure: %s", exc)
        return EXIT_FAILED


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
