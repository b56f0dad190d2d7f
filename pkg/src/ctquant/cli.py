"""Command-line entry point.

Exit codes: 0 success, 1 usage or configuration error, 2 series rejected by
an acceptance filter, 3 pipeline error.  Every run writes ``report.json``
into ``--out`` naming the failing step and reason.
"""

from __future__ import annotations

import csv
import dataclasses
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import click
import numpy as np

from . import aaq as aaq_mod
from . import bmd as bmd_mod
from . import stats
from .core import BMD_LEVELS, LUMBAR_LEVELS, PipelineConfig, SeriesMeta, Volume
from .errors import ConfigError, CtQuantError, SeriesRejected, SpecError
from .ingest import (
    aaq_series_filter,
    bmd_series_filter,
    load_mask,
    load_series,
    load_volume,
    save_mask,
    save_volume,
    write_dicom_series,
)
from .phantom import Bulge, BmdPhantomSpec, CylinderSpec, make_bmd_phantom, make_cylinder, make_lumbar_spine
from .report import build_report, dumps, manifest, write_report

log = logging.getLogger("ctquant")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_REJECTED = 2
EXIT_PIPELINE = 3

CONFIG_ENV = "CT_QUANT_CONFIG"
MAE_LIMIT_MM = 2.0
ICC_GAP_LIMIT = 0.05
SENS_SPEC_LIMIT = 0.70
PEARSON_LIMIT = 0.70


# ---------------------------------------------------------------------------
# configuration file: "key = value" lines, '#' comments


def parse_config_text(text: str, source: str = "<config>") -> PipelineConfig:
    fields = {f.name: f for f in dataclasses.fields(PipelineConfig)}
    defaults = PipelineConfig()
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in fields:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        try:
            values[key] = _parse_value(key, value, getattr(defaults, key))
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key}: {exc}") from exc
    try:
        return PipelineConfig(**values)
    except ValueError as exc:
        raise ConfigError(f"{source}: {exc}") from exc


def _parse_value(key, value, default):
    if key == "kernel_whitelist":
        pairs = []
        for item in filter(None, (s.strip() for s in value.split(";"))):
            if ":" not in item:
                raise ValueError(f"expected 'Manufacturer:Kernel', got {item!r}")
            m, k = item.rsplit(":", 1)
            pairs.append((m.strip(), k.strip()))
        return tuple(pairs)
    if key == "score_conversion":
        if value.lower() in ("", "none"):
            return None
        parts = [float(v) for v in value.split(",")]
        if len(parts) != 3:
            raise ValueError("expected slope,offset,t_z_factor")
        return tuple(parts)
    if isinstance(default, bool):
        if value.lower() in ("1", "true", "yes", "on"):
            return True
        if value.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"expected a boolean, got {value!r}")
    if isinstance(default, int):
        return int(value)
    if isinstance(default, float):
        return float(value)
    return value


def format_config(config: PipelineConfig) -> str:
    lines = []
    for f in dataclasses.fields(PipelineConfig):
        value = getattr(config, f.name)
        if f.name == "kernel_whitelist":
            value = "; ".join(f"{m}:{k}" for m, k in value)
        elif f.name == "score_conversion":
            value = "none" if value is None else ",".join(repr(v) for v in value)
        elif isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{f.name} = {value}")
    return "\n".join(lines) + "\n"


def load_config(path) -> PipelineConfig:
    path = path or os.environ.get(CONFIG_ENV)
    if not path:
        return PipelineConfig()
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    return parse_config_text(p.read_text(), str(p))


# ---------------------------------------------------------------------------
# pipeline runners (shared by single and batch modes)


def _failure(exc: CtQuantError) -> dict:
    reasons = getattr(exc, "reasons", None) or [exc.reason]
    return {
        "status": "rejected" if isinstance(exc, SeriesRejected) else "error",
        "exit_code": EXIT_REJECTED if isinstance(exc, SeriesRejected) else EXIT_PIPELINE,
        "reason": ",".join(reasons),
        "reasons": reasons,
        "step": exc.step,
        "message": str(exc),
    }


def _load_input(dicom, volume_path):
    if dicom:
        return load_series(dicom)
    return load_volume(volume_path)


def _input_summary(volume, meta) -> dict:
    return {"dims": list(volume.dims), "spacing": list(volume.spacing), "orientation": list(volume.orientation),
            "origin": list(volume.origin), "series": meta.to_dict()}


def _load_spine(path, volume, levels):
    mask = load_mask(path, volume=volume)
    if not mask.label_names:
        mask = type(mask)(mask.labels, {n: lv for n, lv in enumerate(levels, start=1)}, spacing=mask.spacing)
    return mask


def run_aaq_files(out, config, dicom=None, volume=None, aorta_mask=None, spine_mask=None) -> tuple:
    """Execute the aortic pipeline on files; returns ``(exit_code, report)``."""
    inputs = {"dicom": dicom, "volume": volume, "aorta_mask": aorta_mask, "spine_mask": spine_mask}
    man = manifest("aaq", config, inputs)
    qc, summary, outputs, verdicts = {}, {}, {}, {}
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        vol, meta = _load_input(dicom, volume)
        summary = _input_summary(vol, meta)
        decision = aaq_series_filter(meta, config)
        qc["series_filter"] = decision.to_dict()
        if not decision.accepted:
            raise SeriesRejected(decision.reasons, "series rejected by the orientation filter")
        aorta = load_mask(aorta_mask, volume=vol)
        spine = _load_spine(spine_mask, vol, LUMBAR_LEVELS)
        report = aaq_mod.run_aaq(vol, aorta, spine, config)
        aaq_mod.write_profile_csv(report, out / "profile.csv")
        outputs = report.to_dict()
        verdicts = {"aneurysm_flag": report.aneurysm_flag}
        pipeline = {"task": "aaq", "status": "ok", "exit_code": EXIT_OK, "reason": None}
    except CtQuantError as exc:
        pipeline = {"task": "aaq", **_failure(exc)}
    doc = build_report(man, summary, pipeline, outputs, qc, verdicts)
    write_report(doc, out / "report.json")
    return pipeline["exit_code"], doc


def run_bmd_files(out, config, dicom=None, volume=None, spine_mask=None, vat_mask=None) -> tuple:
    """Execute the bone-density pipeline on files; returns ``(exit_code, report)``."""
    inputs = {"dicom": dicom, "volume": volume, "spine_mask": spine_mask, "vat_mask": vat_mask}
    man = manifest("bmd", config, inputs)
    qc, summary, outputs, verdicts = {}, {}, {}, {}
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        vol, meta = _load_input(dicom, volume)
        summary = _input_summary(vol, meta)
        decision = bmd_series_filter(meta, config)
        qc["series_filter"] = decision.to_dict()
        if not decision.accepted:
            raise SeriesRejected(decision.reasons, "series rejected by the acquisition filter")
        spine = _load_spine(spine_mask, vol, BMD_LEVELS)
        vat = load_mask(vat_mask, volume=vol)
        try:
            result = bmd_mod.run_bmd(vol, spine, vat, config)
        except bmd_mod.AirQcFail as exc:
            qc["air_qc"] = {"pass": False, "mean_air_hu": exc.mean_air_hu,
                            "window": [config.air_qc_lo, config.air_qc_hi]}
            raise
        qc["air_qc"] = {"pass": True, "mean_air_hu": result.calibration.mean_air_hu,
                        "window": [config.air_qc_lo, config.air_qc_hi]}
        outputs = result.to_dict()
        verdicts = {"flag": result.flag.value, "threshold_hu": config.bmd_hu_threshold}
        pipeline = {"task": "bmd", "status": "ok", "exit_code": EXIT_OK, "reason": None}
    except CtQuantError as exc:
        pipeline = {"task": "bmd", **_failure(exc)}
    doc = build_report(man, summary, pipeline, outputs, qc, verdicts)
    write_report(doc, out / "report.json")
    return pipeline["exit_code"], doc


# ---------------------------------------------------------------------------
# evaluation


def _pct(x):
    return "" if x is None else f"{100 * x:.1f}"


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow(row)


def _fmt(x, digits=6):
    if x is None:
        return ""
    if isinstance(x, bool):
        return "true" if x else "false"
    if isinstance(x, float):
        return f"{x:.{digits}g}"
    return str(x)


def _metric_row(name, est, threshold, verdict):
    if est is None:
        return [name, "", "", "", _fmt(threshold), "SKIPPED" if verdict is None else verdict]
    if isinstance(est, dict):
        return [name, _fmt(est["point"]), _fmt(est["lo"]), _fmt(est["hi"]), _fmt(threshold), verdict or ""]
    return [name, _fmt(est), "", "", _fmt(threshold), verdict or ""]


def evaluate_aaq(pairs, subgroups, seed, n_boot, n_perm, out: Path) -> tuple:
    outputs, verdicts, metric_rows = {}, {}, []
    m = stats.mae(pairs, n_boot, seed)
    outputs["mae_mm"] = m.to_dict()
    verdicts["mae"] = "PASS" if m.point < MAE_LIMIT_MM else "FAIL"
    metric_rows.append(_metric_row("mae_mm", m.to_dict(), MAE_LIMIT_MM, verdicts["mae"]))
    ba = stats.bland_altman(pairs)
    outputs["bland_altman"] = ba.to_dict()
    metric_rows.append(_metric_row("bland_altman_mean_diff_mm", ba.mean_diff, None, None))
    metric_rows.append(_metric_row("bland_altman_within_5mm_fraction", ba.within_limit_fraction, None, None))
    if len(pairs) >= 4:
        r = stats.pearson(pairs)
        outputs["pearson_r"] = r.to_dict()
        metric_rows.append(_metric_row("pearson_r", r.to_dict(), None, None))
    if pairs.has_raters:
        raters = pairs.rater_matrix()
        with_model = np.column_stack([raters, pairs.model])
        rr = stats.icc(raters, n_boot=n_boot, seed=seed)
        rm = stats.icc(with_model, n_boot=n_boot, seed=seed)
        gap = stats.icc_gap(raters, with_model, n_boot=n_boot, seed=seed)
        outputs.update({"icc_raters": rr.to_dict(), "icc_raters_model": rm.to_dict(), "icc_gap": gap.to_dict()})
        verdicts["icc_gap"] = "PASS" if gap.hi < ICC_GAP_LIMIT else "FAIL"
        metric_rows += [
            _metric_row("icc_raters", rr.to_dict(), None, None),
            _metric_row("icc_raters_model", rm.to_dict(), None, None),
            _metric_row("icc_gap", gap.to_dict(), ICC_GAP_LIMIT, verdicts["icc_gap"]),
        ]
    else:
        verdicts["icc_gap"] = "SKIPPED"
        metric_rows.append(_metric_row("icc_gap", None, ICC_GAP_LIMIT, None))

    tables = {}
    for key in subgroups:
        rows = stats.subgroup_report(pairs, key, n_boot=n_boot, seed=seed, n_perm=n_perm)
        tables[key] = rows
        csv_rows = []
        for row in rows:
            diff = row["icc_diff"]
            csv_rows.append([
                key, row["group"], row["count"], _fmt(row["mae"]["point"], 4),
                f"{row['mae']['lo']:.3f}-{row['mae']['hi']:.3f}",
                _fmt(row["rr_icc"], 3) if row["rr_icc"] is not None else "",
                _fmt(row["rm_icc"], 3) if row["rm_icc"] is not None else "",
                f"{diff['lo']:.3f}-{diff['hi']:.3f}" if diff else "",
                _fmt(row["p_value"], 4),
            ])
        _write_csv(out / f"subgroups_{key}.csv",
                   ["key", "group", "count", "mae_mm", "mae_ci_mm", "rr_icc", "rm_icc", "icc_diff_ci", "p_value"],
                   csv_rows)
    outputs["subgroups"] = tables
    if subgroups:
        outputs["subgroup_test"] = stats.SUBGROUP_TEST
    return outputs, verdicts, metric_rows


def _confusion_table_rows(key, rows):
    out = []
    for row in rows:
        sens, spec = row["sens"], row["spec"]
        out.append([
            key, row["group"], row["count"],
            _pct(sens["point"]) if sens else "", f"{_pct(sens['lo'])}-{_pct(sens['hi'])}" if sens else "",
            _pct(spec["point"]) if spec else "", f"{_pct(spec['lo'])}-{_pct(spec['hi'])}" if spec else "",
            "*" if row["sens_below_threshold"] or row["spec_below_threshold"] else "",
        ])
    return out


def evaluate_bmd(confusions, pairs, subgroups, seed, n_boot, out: Path) -> tuple:
    outputs, verdicts, metric_rows = {}, {}, []
    if pairs is not None:
        overall = stats.confusion_from_records(pairs.model, pairs.truth)
        low = (pairs.truth <= -1.0).astype(int)
        if 0 < low.sum() < low.size:
            auc = stats.auroc(-pairs.model, low, n_boot, seed)
            outputs["auroc"] = auc.to_dict()
            metric_rows.append(_metric_row("auroc", auc.to_dict(), None, None))
        r = stats.pearson(pairs)
        outputs["pearson_r"] = r.to_dict()
        verdicts["pearson"] = "PASS" if r.point > PEARSON_LIMIT else "FAIL"
        metric_rows.append(_metric_row("pearson_r", r.to_dict(), PEARSON_LIMIT, verdicts["pearson"]))
        keys = {k for rec in pairs.records for k in rec.subgroups}
        confusions = [stats.ConfusionRow("overall", "overall", overall)]
        for key in sorted(keys):
            groups = sorted({rec.subgroups[key] for rec in pairs.records if key in rec.subgroups})
            for g in groups:
                keep = np.array([rec.subgroups.get(key) == g for rec in pairs.records])
                sub = pairs.subset(keep)
                confusions.append(stats.ConfusionRow(key, g, stats.confusion_from_records(sub.model, sub.truth)))
    else:
        overall_rows = [c for c in confusions if c.key == "overall"]
        if overall_rows:
            overall = overall_rows[0].confusion
        else:
            first = confusions[0].key
            overall = stats.Confusion(0, 0, 0, 0)
            for c in confusions:
                if c.key == first:
                    overall = overall + c.confusion

    bm = stats.binary_metrics(overall)
    outputs["confusion"] = dataclasses.asdict(overall)
    outputs["binary_metrics"] = bm.to_dict()
    for name in ("sens", "spec", "ppv", "npv"):
        est = getattr(bm, name)
        verdict = None
        if name in ("sens", "spec"):
            verdict = "SKIPPED" if est is None else ("PASS" if est.point > SENS_SPEC_LIMIT else "FAIL")
            verdicts[name] = verdict
        metric_rows.append(_metric_row(name, est.to_dict() if est else None,
                                       SENS_SPEC_LIMIT if name in ("sens", "spec") else None, verdict))
    tables = {}
    for key in subgroups:
        rows = stats.subgroup_report(confusions, key)
        tables[key] = rows
        _write_csv(out / f"subgroups_{key}.csv",
                   ["key", "group", "count", "sensitivity_pct", "sensitivity_ci_pct",
                    "specificity_pct", "specificity_ci_pct", "below_threshold"],
                   _confusion_table_rows(key, rows))
    outputs["subgroups"] = tables
    return outputs, verdicts, metric_rows


# ---------------------------------------------------------------------------
# click commands


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Debug logging.")
def cli(verbose):
    """CT aortic diameter and bone-density quantification."""
    logging.basicConfig(level=logging.DEBUG if verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")


def _one_source(dicom, volume):
    if bool(dicom) == bool(volume):
        raise click.UsageError("give exactly one of --dicom or --volume")


_path_in = click.Path(exists=True, dir_okay=False, path_type=Path)
_dir_in = click.Path(exists=True, file_okay=False, path_type=Path)
_dir_out = click.Path(file_okay=False, path_type=Path)


@cli.command("aaq")
@click.option("--dicom", type=_dir_in, help="Directory holding one DICOM series.")
@click.option("--volume", type=_path_in, help="NIfTI volume (with optional .meta.json sidecar).")
@click.option("--aorta-mask", type=_path_in, required=True)
@click.option("--spine-mask", type=_path_in, required=True)
@click.option("--config", "config_path", type=click.Path(dir_okay=False, path_type=Path),
              help=f"Config file; falls back to ${CONFIG_ENV}.")
@click.option("--out", type=_dir_out, required=True)
def cmd_aaq(dicom, volume, aorta_mask, spine_mask, config_path, out):
    """Maximal abdominal aortic diameter."""
    _one_source(dicom, volume)
    config = load_config(config_path)
    code, doc = run_aaq_files(out, config, dicom, volume, aorta_mask, spine_mask)
    _echo_status(doc)
    return code


@cli.command("bmd")
@click.option("--dicom", type=_dir_in)
@click.option("--volume", type=_path_in)
@click.option("--spine-mask", type=_path_in, required=True)
@click.option("--vat-mask", type=_path_in, required=True)
@click.option("--config", "config_path", type=click.Path(dir_okay=False, path_type=Path))
@click.option("--out", type=_dir_out, required=True)
def cmd_bmd(dicom, volume, spine_mask, vat_mask, config_path, out):
    """Normal / low bone-density flag."""
    _one_source(dicom, volume)
    config = load_config(config_path)
    code, doc = run_bmd_files(out, config, dicom, volume, spine_mask, vat_mask)
    _echo_status(doc)
    return code


def _echo_status(doc):
    p = doc["pipeline"]
    if p["status"] == "ok":
        click.echo(f"{p['task']}: ok")
    else:
        click.echo(f"{p['task']}: {p['status']} at {p['step']}: {p['reason']} ({p['message']})", err=True)


@cli.command("eval")
@click.option("--task", type=click.Choice(["aaq", "bmd"]), required=True)
@click.option("--pairs", type=_path_in, help="CSV id,model,truth,rater1..raterK,<subgroup columns>.")
@click.option("--confusion", type=_path_in, help="CSV key,group,tp,fp,fn,tn (bmd only).")
@click.option("--subgroup", "subgroups", multiple=True, help="Subgroup key to tabulate (repeatable).")
@click.option("--seed", type=int, required=True, help="Seed for bootstrap and permutation streams.")
@click.option("--n-boot", type=int, default=stats.DEFAULT_N_BOOT, show_default=True)
@click.option("--n-perm", type=int, default=9999, show_default=True)
@click.option("--out", type=_dir_out, required=True)
def cmd_eval(task, pairs, confusion, subgroups, seed, n_boot, n_perm, out):
    """Validation metrics with acceptance verdicts."""
    if bool(pairs) == bool(confusion):
        raise click.UsageError("give exactly one of --pairs or --confusion")
    if task == "aaq" and confusion:
        raise click.UsageError("--confusion applies to --task bmd only")
    out.mkdir(parents=True, exist_ok=True)
    inputs = {"pairs": pairs, "confusion": confusion}
    man = manifest(f"eval --task {task}", {"n_boot": n_boot, "n_perm": n_perm, "subgroups": list(subgroups)},
                   inputs, seed=seed)
    try:
        if task == "aaq":
            data = stats.read_pairs_csv(pairs)
            outputs, verdicts, rows = evaluate_aaq(data, subgroups, seed, n_boot, n_perm, out)
        else:
            data = stats.read_pairs_csv(pairs) if pairs else None
            table = stats.read_confusion_csv(confusion) if confusion else None
            outputs, verdicts, rows = evaluate_bmd(table, data, subgroups, seed, n_boot, out)
        pipeline = {"task": f"eval-{task}", "status": "ok", "exit_code": EXIT_OK, "reason": None}
    except CtQuantError as exc:
        outputs, verdicts, rows = {}, {}, []
        pipeline = {"task": f"eval-{task}", **_failure(exc)}
    _write_csv(out / "metrics.csv", ["metric", "point", "lo", "hi", "threshold", "verdict"], rows)
    doc = build_report(man, {}, pipeline, outputs, {}, verdicts)
    write_report(doc, out / "report.json")
    for name, verdict in verdicts.items():
        click.echo(f"{name}: {verdict}")
    if pipeline["status"] != "ok":
        _echo_status(doc)
    return pipeline["exit_code"]


@cli.group("phantom")
def cmd_phantom():
    """Write synthetic phantoms in the ingest formats."""


def _phantom_meta(kvp, kernel, manufacturer, thickness):
    return SeriesMeta(kvp=kvp, kernel=kernel, manufacturer=manufacturer, slice_thickness_mm=thickness,
                      image_type_flags=frozenset({"ORIGINAL", "PRIMARY", "AXIAL"}),
                      orientation=(1.0, 0.0, 0.0, 0.0, 1.0, 0.0), series_uid="2.25.1")


def _mask_name(stem, fmt):
    return f"{stem}.nii.gz" if fmt == "nifti" else f"{stem}.raw"


_meta_options = [
    click.option("--kvp", type=float, default=120.0, show_default=True),
    click.option("--kernel", default="STANDARD", show_default=True),
    click.option("--manufacturer", default="GE MEDICAL SYSTEMS", show_default=True),
    click.option("--mask-format", type=click.Choice(["nifti", "raw"]), default="nifti", show_default=True),
    click.option("--dicom/--no-dicom", default=False, help="Also write a DICOM series."),
]


def _with_meta_options(f):
    for opt in reversed(_meta_options):
        f = opt(f)
    return f


@cmd_phantom.command("cylinder")
@click.option("--diameter", type=float, required=True, help="Cylinder diameter (mm).")
@click.option("--tilt", type=float, default=0.0, show_default=True, help="Axis tilt from the slice normal (deg).")
@click.option("--azimuth", type=float, default=0.0, show_default=True)
@click.option("--bulge-slice", type=int)
@click.option("--bulge-diameter", type=float)
@click.option("--spacing", type=float, nargs=3, default=(1.0, 1.0, 1.0), show_default=True)
@click.option("--dims", type=int, nargs=3, default=(128, 128, 64), show_default=True)
@_with_meta_options
@click.option("--out", type=_dir_out, required=True)
def cmd_phantom_cylinder(diameter, tilt, azimuth, bulge_slice, bulge_diameter, spacing, dims,
                         kvp, kernel, manufacturer, mask_format, dicom, out):
    """Aorta-like cylinder with a lumbar spine mask."""
    if (bulge_slice is None) != (bulge_diameter is None):
        raise click.UsageError("--bulge-slice and --bulge-diameter go together")
    bulge = Bulge(bulge_slice, bulge_diameter) if bulge_slice is not None else None
    spec = CylinderSpec(diameter, tilt, azimuth, bulge=bulge)
    aorta, true_d = make_cylinder(spec, spacing, dims)
    data = np.where(aorta.labels > 0, 200.0, 0.0)
    volume = Volume(data, spacing)
    spine = make_lumbar_spine(dims, spacing, 0, dims[2] - 1)
    meta = _phantom_meta(kvp, kernel, manufacturer, spacing[2])
    out.mkdir(parents=True, exist_ok=True)
    save_volume(volume, out / "volume.nii.gz", meta)
    save_mask(aorta, out / _mask_name("aorta", mask_format))
    save_mask(spine, out / _mask_name("spine", mask_format))
    if dicom:
        write_dicom_series(volume, meta, out / "dicom")
    truth = {"kind": "cylinder", "true_diameter_mm": true_d, "diameter_mm": diameter, "tilt_deg": tilt,
             "azimuth_deg": azimuth, "bulge": dataclasses.asdict(bulge) if bulge else None,
             "spacing": list(spacing), "dims": list(dims)}
    (out / "truth.json").write_text(dumps(truth))
    click.echo(f"cylinder phantom written to {out}")
    return EXIT_OK


@cmd_phantom.command("bmd")
@click.option("--vertebra-hu", type=float, nargs=4, default=(335.0, 335.0, 335.0, 335.0), show_default=True,
              help="L1 L2 L3 L4 trabecular HU.")
@click.option("--vat-hu", type=float, default=-95.0, show_default=True)
@click.option("--air-hu", type=float, default=-1000.0, show_default=True)
@click.option("--noise", type=float, default=0.0, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--miscal", type=float, nargs=2, default=None, help="SLOPE INTERCEPT applied to the whole volume.")
@_with_meta_options
@click.option("--out", type=_dir_out, required=True)
def cmd_phantom_bmd(vertebra_hu, vat_hu, air_hu, noise, seed, miscal, kvp, kernel, manufacturer,
                    mask_format, dicom, out):
    """Block-vertebra phantom with fat and air calibration regions."""
    spec = BmdPhantomSpec(dict(zip(BMD_LEVELS, vertebra_hu)), vat_hu, air_hu, noise, seed,
                          tuple(miscal) if miscal else None)
    volume, spine, vat, truth = make_bmd_phantom(spec)
    meta = _phantom_meta(kvp, kernel, manufacturer, spec.spacing[2])
    out.mkdir(parents=True, exist_ok=True)
    save_volume(volume, out / "volume.nii.gz", meta)
    save_mask(spine, out / _mask_name("spine", mask_format))
    save_mask(vat, out / _mask_name("vat", mask_format))
    if dicom:
        write_dicom_series(volume, meta, out / "dicom")
    (out / "truth.json").write_text(dumps({"kind": "bmd", **truth}))
    click.echo(f"bmd phantom written to {out}")
    return EXIT_OK


@cli.command("batch")
@click.option("--task", type=click.Choice(["aaq", "bmd"]), required=True)
@click.option("--batch", "batch_file", type=_path_in, required=True,
              help="CSV with columns name and dicom|volume plus the task's mask columns.")
@click.option("--config", "config_path", type=click.Path(dir_okay=False, path_type=Path))
@click.option("--workers", type=int, default=4, show_default=True)
@click.option("--out", type=_dir_out, required=True)
def cmd_batch(task, batch_file, config_path, workers, out):
    """Run many scans concurrently; one output directory per scan."""
    config = load_config(config_path)
    with open(batch_file, newline="") as fh:
        jobs = list(csv.DictReader(fh))
    base = batch_file.parent

    def resolve(value):
        if not value:
            return None
        p = Path(value)
        return p if p.is_absolute() else base / p

    def run(job):
        dest = out / job["name"]
        common = dict(dicom=resolve(job.get("dicom")), volume=resolve(job.get("volume")))
        if task == "aaq":
            return run_aaq_files(dest, config, aorta_mask=resolve(job.get("aorta_mask")),
                                 spine_mask=resolve(job.get("spine_mask")), **common)
        return run_bmd_files(dest, config, spine_mask=resolve(job.get("spine_mask")),
                             vat_mask=resolve(job.get("vat_mask")), **common)

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        results = list(pool.map(run, jobs))
    rows = [[job["name"], code, doc["pipeline"]["reason"] or ""] for job, (code, doc) in zip(jobs, results)]
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "batch_summary.csv", ["name", "exit_code", "reason"], rows)
    codes = [code for code, _ in results]
    return max(codes) if codes else EXIT_OK


def main(argv=None) -> int:
    try:
        result = cli.main(args=argv, prog_name="ctquant", standalone_mode=False)
    except click.exceptions.Exit as exc:
        return int(exc.exit_code)
    except click.UsageError as exc:
        exc.show()
        return EXIT_USAGE
    except click.Abort:
        click.echo("aborted", err=True)
        return EXIT_USAGE
    except ConfigError as exc:
        click.echo(f"config error: {exc}", err=True)
        return EXIT_USAGE
    except SpecError as exc:
        click.echo(f"invalid phantom specification: {exc}", err=True)
        return EXIT_USAGE
    return int(result or 0)


if __name__ == "__main__":
    sys.exit(main())
