"""
CSV reports, reference tables and netpbm exemplars for a transfer run.

Every CSV is written with ``\\n`` line endings, rows in a fixed order and
floats in their shortest round-trip form, so reruns with the same seeds give
byte-identical files. NaN statistics are written as empty cells.
"""

import csv
import logging
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np
from omegaconf import DictConfig

from regional_adv import get_reference
from regional_adv.attack import AttackConfig, run_attack
from regional_adv.data import LabelledDataset
from regional_adv.experiment import (
    BASELINE_FAMILY,
    POOLED_FAMILY,
    CellAggregate,
    TransferRecord,
    sort_records,
)
from regional_adv.masks import LocalizationMask
from regional_adv.netpbm import encode_ppm
from regional_adv.norms import NormTriple
from regional_adv.zoo import Model

logger = logging.getLogger(__name__)

RECORD_FIELDS = [
    "image_id",
    "source",
    "target",
    "family",
    "fraction",
    "realized_fraction",
    "true_label",
    "target_class",
    "source_success",
    "transfer_success",
    "l0",
    "l2",
    "linf",
    "iterations_used",
    "retained",
]
CELL_FIELDS = ["family", "fraction", "source", "target"]
TREND_TOLERANCE = 0.05
MASK_GRAY = 128 / 255


class ReportWriteError(OSError):
    """Raised when a report file cannot be written."""


@dataclass(frozen=True)
class TrendCheck:
    check: str
    source: str
    target: str
    detail: str
    value: float
    threshold: float
    passed: bool


def _fmt(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return "1" if value else "0"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return "" if math.isnan(value) else repr(float(value))
    return str(value)


def _write_rows(path: Path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as handle:
            writer = csv.writer(handle, lineterminator="\n")
            writer.writerow(header)
            writer.writerows([_fmt(v) for v in row] for row in rows)
    except OSError as e:
        raise ReportWriteError(f"Failed to write {path}: {e}") from e
    logger.info("Wrote %s", path)
    return path


def _write_bytes(path: Path, payload: bytes) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(payload)
    except OSError as e:
        raise ReportWriteError(f"Failed to write {path}: {e}") from e
    return path


def write_records(records: Iterable[TransferRecord], path: Path) -> Path:
    rows = [
        [
            r.image_id,
            r.source,
            r.target,
            r.family,
            r.fraction,
            r.realized_fraction,
            r.true_label,
            r.target_class,
            r.source_success,
            r.transfer_success,
            r.norms.l0,
            r.norms.l2,
            r.norms.linf,
            r.iterations_used,
            r.retained,
        ]
        for r in sort_records(records)
    ]
    return _write_rows(path, RECORD_FIELDS, rows)


def read_records(path: Path) -> list[TransferRecord]:
    """
    Load records written by :func:`write_records`.

    Raises:
        ValueError: If the header or a row is malformed.
    """
    path = Path(path)
    with path.open(newline="") as handle:
        reader = csv.DictReader(handle)
        if reader.fieldnames != RECORD_FIELDS:
            raise ValueError(f"{path} does not have the records header")
        records = []
        for line, row in enumerate(reader, start=2):
            try:
                records.append(
                    TransferRecord(
                        image_id=int(row["image_id"]),
                        source=row["source"],
                        target=row["target"],
                        family=row["family"],
                        fraction=float(row["fraction"]),
                        realized_fraction=float(row["realized_fraction"]),
                        true_label=int(row["true_label"]),
                        target_class=int(row["target_class"]),
                        source_success=row["source_success"] == "1",
                        transfer_success=row["transfer_success"] == "1",
                        norms=NormTriple(
                            l0=float(row["l0"]),
                            l2=float(row["l2"]),
                            linf=float(row["linf"]),
                        ),
                        iterations_used=int(row["iterations_used"]),
                        retained=row["retained"] == "1",
                    )
                )
            except (TypeError, ValueError) as e:
                raise ValueError(f"{path}, line {line}: {e}") from e
    logger.info("Read %d records from %s", len(records), path)
    return records


def _cell_key(a: CellAggregate) -> list:
    return [a.family, a.fraction, a.source, a.target]


def write_transfer_matrix(aggregates: Iterable[CellAggregate], path: Path) -> Path:
    """Localized transfer rates per family and pooled, one row per cell."""
    header = [*CELL_FIELDS, "n", "n_transfer", "transfer_rate"]
    rows = [
        [*_cell_key(a), a.n, a.n_transfer, a.transfer_rate]
        for a in aggregates
        if a.family != BASELINE_FAMILY
    ]
    return _write_rows(path, header, rows)


def write_norm_stats(aggregates: Iterable[CellAggregate], path: Path) -> Path:
    header = [
        *CELL_FIELDS,
        "n_transfer",
        "l0_mean",
        "l0_std_ddof1",
        "l2_mean",
        "l2_std_ddof1",
        "linf_mean",
        "linf_std_ddof1",
    ]
    rows = [
        [
            *_cell_key(a),
            a.n_transfer,
            a.l0_mean,
            a.l0_std,
            a.l2_mean,
            a.l2_std,
            a.linf_mean,
            a.linf_std,
        ]
        for a in aggregates
    ]
    return _write_rows(path, header, rows)


def write_lower_norm_fractions(
    aggregates: Iterable[CellAggregate], path: Path
) -> Path:
    header = [*CELL_FIELDS, "n_transfer", "lower_l0", "lower_l2", "lower_linf"]
    rows = [
        [*_cell_key(a), a.n_transfer, a.lower_l0, a.lower_l2, a.lower_linf]
        for a in aggregates
        if a.family != BASELINE_FAMILY
    ]
    return _write_rows(path, header, rows)


def write_protocol_summary(
    records: Iterable[TransferRecord], path: Path, n_transfer: int | None = None
) -> Path:
    """
    Attempted and retained counts per (source, target) pair.

    ``images_attacked`` counts the distinct images given the unlocalized
    attack; the shortfall is left blank when ``n_transfer`` is unknown.
    """
    baseline = [r for r in records if r.family == BASELINE_FAMILY]
    header = [
        "source",
        "target",
        "images_attacked",
        "source_successes",
        "transferring",
        "retained",
        "requested",
        "shortfall",
    ]
    rows = []
    for source, target in sorted({(r.source, r.target) for r in baseline}):
        pair = [r for r in baseline if r.source == source and r.target == target]
        retained = sum(r.retained for r in pair)
        rows.append(
            [
                source,
                target,
                len({r.image_id for r in pair}),
                len({r.image_id for r in pair if r.source_success}),
                sum(r.transfer_success for r in pair),
                retained,
                n_transfer,
                None if n_transfer is None else max(0, n_transfer - retained),
            ]
        )
    return _write_rows(path, header, rows)


def evaluate_trends(
    aggregates: Sequence[CellAggregate], tolerance: float = TREND_TOLERANCE
) -> list[TrendCheck]:
    """
    Qualitative checks on a run.

    pooled_positive: every pooled localized transfer rate is above zero.
    pooled_monotone: pooled rates do not fall by more than ``tolerance``
    from one fraction level to the next.
    center_l2_below_unlocalized: for each cross-model pair the smallest
    center mask gives a mean L2 no larger than the unlocalized attack, with
    a summary row requiring this for at least two thirds of the pairs.
    """
    by_key = {(a.source, a.target, a.family, a.fraction): a for a in aggregates}
    pairs = sorted({(a.source, a.target) for a in aggregates})
    pooled_fractions = sorted(
        {a.fraction for a in aggregates if a.family == POOLED_FAMILY}
    )
    checks: list[TrendCheck] = []

    for source, target in pairs:
        rates = [
            by_key[(source, target, POOLED_FAMILY, f)].transfer_rate
            for f in pooled_fractions
        ]
        for fraction, rate in zip(pooled_fractions, rates, strict=True):
            checks.append(
                TrendCheck(
                    "pooled_positive",
                    source,
                    target,
                    f"{fraction:g}",
                    rate,
                    0.0,
                    bool(rate > 0),
                )
            )
        for i in range(1, len(pooled_fractions)):
            change = rates[i] - rates[i - 1]
            checks.append(
                TrendCheck(
                    "pooled_monotone",
                    source,
                    target,
                    f"{pooled_fractions[i - 1]:g}->{pooled_fractions[i]:g}",
                    change,
                    -tolerance,
                    bool(change >= -tolerance),
                )
            )

    center_fractions = sorted(
        {a.fraction for a in aggregates if a.family == "center"}
    )
    if center_fractions:
        smallest = center_fractions[0]
        center_checks = []
        for source, target in pairs:
            unlocalized = by_key.get((source, target, BASELINE_FAMILY, 1.0))
            if source == target or unlocalized is None:
                continue
            center = by_key[(source, target, "center", smallest)]
            difference = center.l2_mean - unlocalized.l2_mean
            center_checks.append(
                TrendCheck(
                    "center_l2_below_unlocalized",
                    source,
                    target,
                    f"{smallest:g}",
                    difference,
                    0.0,
                    bool(difference <= 0),
                )
            )
        if center_checks:
            passing = sum(c.passed for c in center_checks)
            needed = math.ceil(2 * len(center_checks) / 3)
            checks.extend(center_checks)
            checks.append(
                TrendCheck(
                    "center_l2_below_unlocalized",
                    "all",
                    "all",
                    f"{passing} of {len(center_checks)} pairs",
                    float(passing),
                    float(needed),
                    passing >= needed,
                )
            )
    return checks


def write_trends(aggregates: Sequence[CellAggregate], path: Path) -> Path:
    header = ["check", "source", "target", "detail", "value", "threshold", "passed"]
    rows = [
        [c.check, c.source, c.target, c.detail, c.value, c.threshold, c.passed]
        for c in evaluate_trends(aggregates)
    ]
    return _write_rows(path, header, rows)


def write_published_reference(
    path: Path, reference: DictConfig | None = None
) -> Path:
    """
    Published transfer rates and mean distances beside the architecture each
    published model maps to. Transfer rates are pooled over mask families.
    """
    reference = get_reference() if reference is None else reference
    roles = reference.roles
    order = list(reference.role_order)
    header = [
        "source_role",
        "target_role",
        "source",
        "target",
        "family",
        "fraction",
        "transfer_rate",
        "l0_mean",
        "l2_mean",
        "linf_mean",
    ]
    rows = []
    for level in reference.transfer_pooled:
        for source_role in order:
            for target_role, rate in zip(order, level[source_role], strict=True):
                rows.append(
                    [
                        source_role,
                        target_role,
                        roles[source_role],
                        roles[target_role],
                        POOLED_FAMILY,
                        float(level.fraction),
                        float(rate),
                        None,
                        None,
                        None,
                    ]
                )
    for entry in reference.norms:
        for k, (source_role, target_role) in enumerate(reference.pairs):
            rows.append(
                [
                    source_role,
                    target_role,
                    roles[source_role],
                    roles[target_role],
                    entry.family,
                    float(entry.fraction),
                    None,
                    float(entry.l0[k]),
                    float(entry.l2[k]),
                    float(entry.linf[k]),
                ]
            )
    return _write_rows(path, header, rows)


def write_model_accuracy(
    accuracies: Mapping[str, float], pool_size: int, path: Path
) -> Path:
    header = ["architecture", "test_accuracy", "clean_correct_pool"]
    rows = [[name, accuracy, pool_size] for name, accuracy in accuracies.items()]
    return _write_rows(path, header, rows)


def emit_reports(
    aggregates: Sequence[CellAggregate],
    records: Iterable[TransferRecord],
    out_dir: Path,
    n_transfer: int | None = None,
    reference: DictConfig | None = None,
) -> dict[str, Path]:
    """
    Write the record dump and every table derived from it into ``out_dir``.

    Returns:
        Paths keyed by report name.

    Raises:
        ReportWriteError: If a file cannot be written; the message names it.
    """
    out_dir = Path(out_dir)
    records = sort_records(records)
    return {
        "records": write_records(records, out_dir / "records.csv"),
        "transfer_matrix": write_transfer_matrix(
            aggregates, out_dir / "transfer_matrix.csv"
        ),
        "norm_stats": write_norm_stats(aggregates, out_dir / "norm_stats.csv"),
        "lower_norm_fractions": write_lower_norm_fractions(
            aggregates, out_dir / "lower_norm_fractions.csv"
        ),
        "protocol_summary": write_protocol_summary(
            records, out_dir / "protocol_summary.csv", n_transfer
        ),
        "trends": write_trends(aggregates, out_dir / "trends.csv"),
        "published_reference": write_published_reference(
            out_dir / "published_reference.csv", reference
        ),
    }


def mask_panel(mask: LocalizationMask | None, size: int) -> np.ndarray:
    """A 3×N×N gray rendering of a mask; selected locations are gray."""
    grid = np.ones((size, size), dtype=bool) if mask is None else mask.grid
    return np.broadcast_to(np.where(grid, MASK_GRAY, 0.0), (3, size, size))


def triptych(
    original: np.ndarray, mask: LocalizationMask | None, adversarial: np.ndarray
) -> np.ndarray:
    """Original, mask and adversarial image side by side."""
    panel = mask_panel(mask, original.shape[-1])
    return np.concatenate([original, panel, adversarial], axis=2)


def export_exemplars(
    models: Sequence[Model],
    images: LabelledDataset,
    records: Iterable[TransferRecord],
    masks: Sequence[LocalizationMask],
    cfg: AttackConfig,
    out_dir: Path,
) -> list[Path]:
    """
    Re-run the attacks on each source's first retained image, once
    unlocalized and once per mask, and save each as a PPM triptych under
    ``images/``. Every mask is also saved as a PGM under ``masks/``.

    Writing fails with ValueError if an adversarial image is off the 1/255
    grid.
    """
    out_dir = Path(out_dir)
    written = [
        _write_bytes(out_dir / "masks" / f"{mask.spec.label}.pgm", mask.to_pgm())
        for mask in masks
    ]
    records = list(records)
    for source in models:
        name = source.architecture.value
        retained = [
            r
            for r in records
            if r.source == name and r.family == BASELINE_FAMILY and r.retained
        ]
        if not retained:
            logger.warning("No retained images for %s; skipping exemplars", name)
            continue
        first = min(retained, key=lambda r: r.image_id)
        row = images.position_of(first.image_id)
        for mask in [None, *masks]:
            outcome = run_attack(
                source,
                images.images[row],
                replace(cfg, mask=mask),
                first.target_class,
            )
            label = "full" if mask is None else mask.spec.label
            picture = triptych(outcome.original, mask, outcome.adversarial)
            path = out_dir / "images" / f"{name}_{label}.ppm"
            written.append(_write_bytes(path, encode_ppm(picture)))
    logger.info("Wrote %d exemplar files to %s", len(written), out_dir)
    return written
