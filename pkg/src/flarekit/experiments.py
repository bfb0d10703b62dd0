"""Stage-ordering ablation: run pairs through back-end variants and tabulate metrics."""
from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import rawio
from .dataset import PairRecord
from .errors import ConfigurationError
from .isp import PRESETS, PipelineConfig, apply_stage, augment_config, run_frontend
from .metrics import psnr, ssim
from .removal import REMOVER_KINDS, BaselineParams, FlareRemover

OPERATIONS = ("denoise", "sharpen", "compression")

# the cumulative rows of the ordering study: stage-free, +denoise, +sharpen,
# +compression, and the no-denoise pipeline
TABLE_ROWS: tuple[tuple[tuple[str, ...], int], ...] = (
    ((), 1),
    (("denoise",), 1),
    (("denoise", "sharpen"), 1),
    (("denoise", "sharpen", "compression"), 1),
    (("sharpen", "compression"), 4),
)

# stage parameters used by the ablation unless overridden
ABLATION_PARAMS = {"denoise_strength": 1.0, "sharpen_amount": 1.0, "sharpen_radius": 1.5,
                   "jpeg_quality": 60}


@dataclass(frozen=True)
class RowSpec:
    operations: tuple[str, ...]
    ordering_id: int

    def __post_init__(self):
        for op in self.operations:
            if op not in OPERATIONS:
                raise ConfigurationError(f"unknown operation {op!r}")
        ops = tuple(sorted(set(self.operations), key=OPERATIONS.index))
        if self.ordering_id not in PRESETS:
            raise ConfigurationError(f"ordering_id must be 1..4, got {self.ordering_id}")
        object.__setattr__(self, "operations", ops)

    @property
    def stages(self) -> tuple[str, ...]:
        keep = set(self.operations) | {"flare_removal"}
        return tuple(s for s in PRESETS[self.ordering_id] if s in keep)

    def config(self, **params) -> PipelineConfig:
        stages = self.stages
        cid = self.ordering_id if stages == PRESETS[self.ordering_id] else None
        return PipelineConfig(backend_order=stages, config_id=cid, **params)


def ordering_rows(orderings: Sequence[int]) -> list[RowSpec]:
    """One full-preset row per ordering id."""
    rows = []
    for oid in orderings:
        if oid not in PRESETS:
            raise ConfigurationError(f"ordering ids must be 1..4, got {oid}")
        rows.append(RowSpec(tuple(s for s in PRESETS[oid] if s != "flare_removal"), oid))
    return rows


def table_rows() -> list[RowSpec]:
    return [RowSpec(ops, oid) for ops, oid in TABLE_ROWS]


@dataclass(frozen=True)
class AblationRow:
    operations: tuple[str, ...]
    ordering_id: int
    psnr_mean: float
    psnr_std: float
    ssim_mean: float
    ssim_std: float
    delta_psnr: float | None = None
    delta_ssim: float | None = None
    lpips: float | None = None  # reserved for externally computed values


@dataclass(frozen=True)
class MetricReport:
    rows: tuple[AblationRow, ...] = ()
    n_pairs: int = 0
    seed: int = 0
    remover: str = "identity"

    def row(self, operations: Sequence[str], ordering_id: int) -> AblationRow:
        key = RowSpec(tuple(operations), ordering_id).operations
        for r in self.rows:
            if r.operations == key and r.ordering_id == ordering_id:
                return r
        raise KeyError((tuple(operations), ordering_id))


def assemble_report(specs: Sequence[RowSpec], per_pair: Sequence[Sequence[tuple[float, float]]],
                    seed: int, remover: str) -> MetricReport:
    """Mean and population std per row; deltas against the first row."""
    rows: list[AblationRow] = []
    n = len(per_pair)
    for i, spec in enumerate(specs):
        ps = np.array([p[i][0] for p in per_pair], dtype=np.float64)
        ss = np.array([p[i][1] for p in per_pair], dtype=np.float64)
        pm, pstd = _mean_std(ps)
        sm, sstd = _mean_std(ss)
        rows.append(AblationRow(spec.operations, spec.ordering_id, pm, pstd, sm, sstd))
    if rows:
        first = rows[0]
        rows = [rows[0]] + [replace(r, delta_psnr=r.psnr_mean - first.psnr_mean,
                                    delta_ssim=r.ssim_mean - first.ssim_mean) for r in rows[1:]]
    return MetricReport(tuple(rows), n, seed, remover)


def _mean_std(v: np.ndarray) -> tuple[float, float]:
    if v.size == 0:
        return float("nan"), float("nan")
    if np.isinf(v).any():
        return float(v.mean()), 0.0 if np.all(v == v[0]) else float("nan")
    return float(v.mean()), float(v.std())


# -------------------------------------------------------------------- runner

@dataclass(frozen=True)
class AblationPair:
    pair_id: str
    raw_corrupted: Path
    raw_reference: Path
    flare_layer: Path | None


def pairs_from_records(records: Sequence[PairRecord], root) -> list[AblationPair]:
    """Accepted records with the files the ablation needs, ordered by pair_id.

    The reference track uses ``raw_reference`` when the builder made one
    (reflective pairs, whose clean raw is not pixel-aligned) and the clean raw
    otherwise.
    """
    root = Path(root)
    out = []
    for r in sorted(records, key=lambda r: r.pair_id):
        if not r.accepted:
            continue
        ref = r.paths.get("raw_reference") or r.paths.get("raw_clean")
        if "raw_corrupted" not in r.paths or ref is None:
            raise ConfigurationError(f"pair {r.pair_id}: raw files missing from the record")
        layer = r.paths.get("flare_layer")
        out.append(AblationPair(r.pair_id, root / r.paths["raw_corrupted"], root / ref,
                                root / layer if layer else None))
    return out


@dataclass(frozen=True)
class AblationSettings:
    rows: tuple[RowSpec, ...]
    remover: str = "baseline"
    baseline: BaselineParams = field(default_factory=BaselineParams)
    params: tuple[tuple[str, Any], ...] = tuple(ABLATION_PARAMS.items())
    seed: int = 0
    augment: bool = False


def _pair_config_params(settings: AblationSettings, index: int) -> dict[str, Any]:
    params = dict(settings.params)
    if settings.augment:
        rng = np.random.default_rng([settings.seed, index])
        aug = augment_config(PipelineConfig(**params), rng)
        params.update(sharpen_amount=aug.sharpen_amount, jpeg_quality=aug.jpeg_quality)
    return params


def evaluate_pair(pair: AblationPair, settings: AblationSettings, index: int = 0):
    """Per-row (psnr, ssim) for one pair. Stage prefixes shared by rows are computed once."""
    raw_c = rawio.read_raw(pair.raw_corrupted)
    raw_r = rawio.read_raw(pair.raw_reference)
    remover = FlareRemover(settings.remover, settings.baseline)
    if settings.remover == "oracle":
        if pair.flare_layer is None:
            raise ConfigurationError(f"pair {pair.pair_id}: oracle remover needs a flare layer")
        remover = remover.with_truth(rawio.read_linear(pair.flare_layer))
    params = _pair_config_params(settings, index)
    base = PipelineConfig(**params)
    fronts = {"corrupted": run_frontend(raw_c), "reference": run_frontend(raw_r)}
    cache: dict[tuple[str, tuple[str, ...]], np.ndarray] = {}

    def run(track: str, stages: tuple[str, ...]) -> np.ndarray:
        if not stages:
            return fronts[track]
        key = (track, stages)
        if key not in cache:
            prev = run(track, stages[:-1])
            cache[key] = apply_stage(prev, stages[-1], base, remover)[0]
        return cache[key]

    results = []
    for spec in settings.rows:
        stages = spec.stages
        out = run("corrupted", stages)
        ref = run("reference", tuple(s for s in stages if s != "flare_removal"))
        results.append((psnr(out, ref), ssim(out, ref)))
    return results


def _evaluate_star(args):
    return evaluate_pair(*args)


def run_ablation(pairs: Sequence[AblationPair], settings: AblationSettings, jobs: int = 1,
                 progress=None) -> MetricReport:
    """Evaluate every pair under every row; deterministic regardless of ``jobs``."""
    if settings.remover not in REMOVER_KINDS:
        raise ConfigurationError(f"unknown remover {settings.remover!r}")
    tasks = [(p, settings, i) for i, p in enumerate(pairs)]
    per_pair = []
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for i, res in enumerate(pool.map(_evaluate_star, tasks)):
                per_pair.append(res)
                if progress:
                    progress(i + 1, len(tasks), pairs[i].pair_id)
    else:
        for i, t in enumerate(tasks):
            per_pair.append(_evaluate_star(t))
            if progress:
                progress(i + 1, len(tasks), pairs[i].pair_id)
    return assemble_report(settings.rows, per_pair, settings.seed, settings.remover)


# ------------------------------------------------------------------- output

CSV_COLUMNS = ("denoise", "sharpen", "compression", "ordering_id", "psnr_mean", "psnr_std",
               "ssim_mean", "ssim_std", "delta_psnr", "delta_ssim", "lpips")


def _fmt(v: float | None, signed: bool = False) -> str:
    if v is None:
        return ""
    if math.isnan(v):
        return "nan"
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return f"{v:+.6f}" if signed else f"{v:.6f}"


def _parse(v: str) -> float | None:
    return None if v == "" else float(v)


def report_csv(report: MetricReport) -> str:
    buf = io.StringIO()
    buf.write(f"# n_pairs={report.n_pairs}\n# seed={report.seed}\n# remover={report.remover}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in report.rows:
        w.writerow([int(op in r.operations) for op in OPERATIONS] + [
            r.ordering_id, _fmt(r.psnr_mean), _fmt(r.psnr_std), _fmt(r.ssim_mean), _fmt(r.ssim_std),
            _fmt(r.delta_psnr, True), _fmt(r.delta_ssim, True), _fmt(r.lpips)])
    return buf.getvalue()


def read_report_csv(text: str) -> MetricReport:
    meta: dict[str, str] = {}
    body = []
    for line in text.splitlines():
        if line.startswith("#"):
            k, _, v = line[1:].strip().partition("=")
            meta[k] = v
        elif line.strip():
            body.append(line)
    rows = []
    for rec in csv.DictReader(body):
        ops = tuple(op for op in OPERATIONS if rec[op] == "1")
        rows.append(AblationRow(ops, int(rec["ordering_id"]), float(rec["psnr_mean"]),
                                float(rec["psnr_std"]), float(rec["ssim_mean"]),
                                float(rec["ssim_std"]), _parse(rec["delta_psnr"]),
                                _parse(rec["delta_ssim"]), _parse(rec["lpips"])))
    return MetricReport(tuple(rows), int(meta.get("n_pairs", 0)), int(meta.get("seed", 0)),
                        meta.get("remover", "identity"))


def _short(v: float) -> str:
    return f"{v:.3f}" if math.isfinite(v) else _fmt(v)


def report_text(report: MetricReport) -> str:
    head = (f"{'Denoise':^9}{'Sharpen':^9}{'Compress':^10}{'Order':^7}"
            f"{'PSNR (dB)':>18}{'SSIM':>18}{'dPSNR':>10}{'dSSIM':>10}")
    lines = [f"remover={report.remover} pairs={report.n_pairs} seed={report.seed}", head,
             "-" * len(head)]
    for r in report.rows:
        mark = ["✓" if op in r.operations else "" for op in OPERATIONS]
        psnr_s = f"{_short(r.psnr_mean)} ± {_short(r.psnr_std)}"
        ssim_s = f"{r.ssim_mean:.4f} ± {r.ssim_std:.4f}"
        dp = "" if r.delta_psnr is None else f"{r.delta_psnr:+.3f}"
        ds = "" if r.delta_ssim is None else f"{r.delta_ssim:+.4f}"
        lines.append(f"{mark[0]:^9}{mark[1]:^9}{mark[2]:^10}{r.ordering_id:^7}"
                     f"{psnr_s:>18}{ssim_s:>18}{dp:>10}{ds:>10}")
    return "\n".join(lines) + "\n"


def render_report(report: MetricReport) -> tuple[str, str]:
    """(text table, CSV)."""
    return report_text(report), report_csv(report)


def write_report(out_dir, report: MetricReport) -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    text, table = render_report(report)
    tp, cp = out_dir / "report.txt", out_dir / "report.csv"
    tp.write_text(text, encoding="utf-8")
    cp.write_text(table, encoding="utf-8")
    return tp, cp
