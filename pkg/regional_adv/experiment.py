"""
Transfer protocol: unlocalized baselines, localized variants and aggregation.

For each source model the harness attacks clean-correct test images with the
unlocalized attack until ``n_transfer`` adversarial examples transfer to each
target model. The images behind those retained baselines are attacked again
under every localization mask, toward the same target class, and each
localized example is tested against every target. Localized transfer rates
are conditioned on the retained baseline images.
"""

import logging
import math
from dataclasses import dataclass, replace
from functools import partial
from typing import Callable, Iterable, Mapping, Sequence, TypeVar

import anyio
import anyio.to_thread
import numpy as np

from regional_adv.attack import (
    AttackConfig,
    AttackOutcome,
    TargetStrategy,
    choose_target,
    run_attack,
)
from regional_adv.data import LabelledDataset, clean_correct_pool, select_eval_images
from regional_adv.masks import LocalizationMask, MaskFamily, protocol_masks
from regional_adv.norms import NormTriple
from regional_adv.zoo import Model, predict

logger = logging.getLogger(__name__)

BASELINE_FAMILY = "none"
POOLED_FAMILY = "pooled"
FAMILY_ORDER = {
    BASELINE_FAMILY: 0,
    MaskFamily.CENTER.value: 1,
    MaskFamily.FRAME.value: 2,
    MaskFamily.RANDOM.value: 3,
    MaskFamily.FULL.value: 4,
    POOLED_FAMILY: 5,
}
DEFAULT_CHUNK_SIZE = 32

T = TypeVar("T")
R = TypeVar("R")


@dataclass(frozen=True)
class TransferRecord:
    """
    One adversarial example tested against one target model.

    ``family`` is "none" for the unlocalized baseline. ``retained`` marks
    records whose (image, source, target) baseline is among the first
    ``n_transfer`` transferring examples; only retained records enter the
    aggregates.
    """

    image_id: int
    source: str
    target: str
    family: str
    fraction: float
    realized_fraction: float
    true_label: int
    target_class: int
    source_success: bool
    transfer_success: bool
    norms: NormTriple
    iterations_used: int
    retained: bool = False

    def __post_init__(self) -> None:
        if self.transfer_success and not self.source_success:
            raise ValueError(
                f"record for image {self.image_id} transfers without source success"
            )

    @property
    def sort_key(self) -> tuple:
        return (
            self.source,
            self.image_id,
            FAMILY_ORDER.get(self.family, len(FAMILY_ORDER)),
            self.fraction,
            self.target,
        )


@dataclass(frozen=True)
class CellAggregate:
    """
    Statistics for one (source, target, family, fraction) cell.

    ``n`` counts retained images, ``n_transfer`` those whose example in this
    cell transferred. Norm statistics cover transferring examples; standard
    deviations use the sample (n − 1) convention. ``lower_*`` are the
    fractions of transferring examples whose norm is strictly below that
    image's unlocalized norm. Undefined values are NaN.
    """

    source: str
    target: str
    family: str
    fraction: float
    n: int
    n_transfer: int
    transfer_rate: float
    l0_mean: float
    l0_std: float
    l2_mean: float
    l2_std: float
    linf_mean: float
    linf_std: float
    lower_l0: float
    lower_l2: float
    lower_linf: float


@dataclass(frozen=True)
class ProtocolConfig:
    n_transfer: int = 200
    pool_size: int | None = None
    families: tuple[MaskFamily, ...] = (
        MaskFamily.CENTER,
        MaskFamily.FRAME,
        MaskFamily.RANDOM,
    )
    fractions: tuple[float, ...] = (0.17, 0.28, 0.45)
    targeted_transfer: bool = False
    workers: int = 4
    seed: int = 0
    chunk_size: int = DEFAULT_CHUNK_SIZE

    def __post_init__(self) -> None:
        if self.n_transfer < 0:
            raise ValueError(f"n_transfer must be non-negative, got {self.n_transfer}")
        if self.pool_size is not None and self.pool_size < 1:
            raise ValueError(f"pool_size must be positive, got {self.pool_size}")
        if self.chunk_size < 1:
            raise ValueError(f"chunk_size must be positive, got {self.chunk_size}")


@dataclass(frozen=True)
class ProtocolResult:
    records: list[TransferRecord]
    aggregates: list[CellAggregate]
    images: LabelledDataset
    masks: list[LocalizationMask]
    pool_size: int


def map_concurrently(
    func: Callable[[T], R], items: Sequence[T], workers: int
) -> list[R]:
    """
    Apply ``func`` to every item on up to ``workers`` threads.

    Results come back in item order whatever the scheduling.
    """
    if workers <= 1 or len(items) <= 1:
        return [func(item) for item in items]

    results: list[R | None] = [None] * len(items)

    async def run_all() -> None:
        limiter = anyio.CapacityLimiter(workers)

        async def run_one(index: int, item: T) -> None:
            results[index] = await anyio.to_thread.run_sync(
                func, item, limiter=limiter
            )

        async with anyio.create_task_group() as tg:
            for index, item in enumerate(items):
                tg.start_soon(run_one, index, item)

    anyio.run(run_all)
    return results  # type: ignore[return-value]


def target_seed(seed: int, image_id: int) -> int:
    """Per-image seed, fixed across sources and masks."""
    return int(np.random.SeedSequence([seed, image_id]).generate_state(1)[0])


def _transfers(
    target: Model, outcome: AttackOutcome, true_label: int, targeted: bool
) -> bool:
    if not outcome.source_success:
        return False
    prediction = predict(target, outcome.adversarial)
    if targeted:
        return prediction == outcome.target_class
    return prediction != true_label


def _records_for(
    outcome: AttackOutcome,
    image_id: int,
    true_label: int,
    source: Model,
    targets: Sequence[Model],
    mask: LocalizationMask | None,
    targeted_transfer: bool,
) -> list[TransferRecord]:
    family = BASELINE_FAMILY if mask is None else mask.spec.family.value
    fraction = 1.0 if mask is None else mask.spec.fraction
    realized = 1.0 if mask is None else mask.realized_fraction
    return [
        TransferRecord(
            image_id=image_id,
            source=source.architecture.value,
            target=target.architecture.value,
            family=family,
            fraction=fraction,
            realized_fraction=realized,
            true_label=true_label,
            target_class=outcome.target_class,
            source_success=outcome.source_success,
            transfer_success=_transfers(
                target, outcome, true_label, targeted_transfer
            ),
            norms=outcome.norms,
            iterations_used=outcome.iterations_used,
        )
        for target in targets
    ]


def run_baseline(
    source: Model,
    targets: Sequence[Model],
    images: LabelledDataset,
    cfg: AttackConfig,
    n_transfer: int,
    seed: int = 0,
    targeted_transfer: bool = False,
    workers: int = 1,
    chunk_size: int = DEFAULT_CHUNK_SIZE,
) -> list[TransferRecord]:
    """
    Unlocalized attacks on ``images``, in order, until every target has
    ``n_transfer`` transferring examples or the images run out.

    Images are attacked in chunks of ``chunk_size``, so the attempted set
    depends on the chunk size but never on ``workers``. The first
    ``n_transfer`` transferring records per target are marked retained.
    Under the fixed target strategy, images whose label is the fixed class
    are skipped.

    Raises:
        ValueError: If no image is left to attack while examples are
            requested.
    """
    if n_transfer == 0:
        return []
    if len(images) == 0:
        raise ValueError("no evaluation images to attack")

    unlocalized = replace(cfg, mask=None)
    eligible = list(range(len(images)))
    if TargetStrategy(cfg.target_strategy) is TargetStrategy.FIXED:
        eligible = [i for i in eligible if images.labels[i] != cfg.fixed_class]
        skipped = len(images) - len(eligible)
        if skipped:
            logger.info(
                "Skipping %d images labelled with the fixed target class %d",
                skipped,
                cfg.fixed_class,
            )
        if not eligible:
            raise ValueError(
                f"every evaluation image is labelled {cfg.fixed_class}, "
                "the fixed target class"
            )

    def attack_one(row: int) -> list[TransferRecord]:
        image_id = int(images.ids[row])
        true_label = int(images.labels[row])
        target_class = choose_target(
            source,
            images.images[row],
            unlocalized.target_strategy,
            seed=target_seed(seed, image_id),
            fixed_class=unlocalized.fixed_class,
            true_label=true_label,
        )
        outcome = run_attack(source, images.images[row], unlocalized, target_class)
        return _records_for(
            outcome, image_id, true_label, source, targets, None, targeted_transfer
        )

    records: list[TransferRecord] = []
    transferred = dict.fromkeys((t.architecture.value for t in targets), 0)
    attempted = 0
    for start in range(0, len(eligible), chunk_size):
        rows = eligible[start : start + chunk_size]
        for image_records in map_concurrently(attack_one, rows, workers):
            for record in image_records:
                if record.transfer_success and transferred[record.target] < n_transfer:
                    transferred[record.target] += 1
                    record = replace(record, retained=True)
                records.append(record)
        attempted += len(rows)
        if min(transferred.values()) >= n_transfer:
            break

    name = source.architecture.value
    successes = len({r.image_id for r in records if r.source_success})
    logger.info(
        "Baseline for %s: %d images attacked, %d source successes",
        name,
        attempted,
        successes,
    )
    for target, count in transferred.items():
        if count < n_transfer:
            logger.warning(
                "Images exhausted for %s -> %s: %d of %d transferring examples",
                name,
                target,
                count,
                n_transfer,
            )
    return records


def run_localized(
    source: Model,
    targets: Sequence[Model],
    images: LabelledDataset,
    baseline: Sequence[TransferRecord],
    masks: Sequence[LocalizationMask],
    cfg: AttackConfig,
    targeted_transfer: bool = False,
    workers: int = 1,
) -> list[TransferRecord]:
    """
    Attack every retained baseline image of ``source`` once per mask, toward
    its baseline target class, and test each result against every target.

    Localized records inherit ``retained`` from the baseline record of the
    same (image, target) pair.

    Raises:
        ValueError: If a baseline record belongs to another source or its
            image is not in ``images``.
    """
    name = source.architecture.value
    retained: dict[tuple[int, str], bool] = {}
    target_classes: dict[int, int] = {}
    for record in baseline:
        if record.source != name or record.family != BASELINE_FAMILY:
            raise ValueError(
                f"baseline record for image {record.image_id} is not an "
                f"unlocalized {name} record"
            )
        retained[(record.image_id, record.target)] = record.retained
        if record.retained:
            target_classes[record.image_id] = record.target_class

    image_ids = sorted(target_classes)
    rows = {}
    for image_id in image_ids:
        try:
            rows[image_id] = images.position_of(image_id)
        except KeyError as e:
            raise ValueError(f"missing baseline image {image_id}") from e

    jobs = [(image_id, mask) for image_id in image_ids for mask in masks]

    def attack_one(job: tuple[int, LocalizationMask]) -> list[TransferRecord]:
        image_id, mask = job
        row = rows[image_id]
        true_label = int(images.labels[row])
        outcome = run_attack(
            source,
            images.images[row],
            replace(cfg, mask=mask),
            target_classes[image_id],
        )
        return [
            replace(record, retained=retained.get((image_id, record.target), False))
            for record in _records_for(
                outcome, image_id, true_label, source, targets, mask, targeted_transfer
            )
        ]

    records = [
        record
        for job_records in map_concurrently(attack_one, jobs, workers)
        for record in job_records
    ]
    logger.info(
        "Localized attacks for %s: %d images × %d masks",
        name,
        len(image_ids),
        len(masks),
    )
    return records


def _sample_std(values: np.ndarray) -> float:
    if values.size == 0:
        return math.nan
    if values.size == 1:
        return 0.0
    return float(np.std(values, ddof=1))


def _mean(values: np.ndarray) -> float:
    return float(np.mean(values)) if values.size else math.nan


def _cell(
    key: tuple[str, str, str, float],
    members: list[TransferRecord],
    baseline_norms: Mapping[tuple[str, int], NormTriple],
) -> CellAggregate:
    source, target, family, fraction = key
    transferring = [r for r in members if r.transfer_success]
    norms = np.array(
        [r.norms.as_tuple() for r in transferring], dtype=np.float64
    ).reshape(-1, 3)
    lower = np.zeros(3)
    for record in transferring:
        reference = baseline_norms.get((record.source, record.image_id))
        if reference is None:
            raise ValueError(
                f"no unlocalized record for image {record.image_id} from {source}"
            )
        lower += np.array(record.norms.as_tuple()) < np.array(reference.as_tuple())
    lower = lower / len(transferring) if transferring else np.full(3, math.nan)
    n = len(members)
    return CellAggregate(
        source=source,
        target=target,
        family=family,
        fraction=fraction,
        n=n,
        n_transfer=len(transferring),
        transfer_rate=len(transferring) / n if n else math.nan,
        l0_mean=_mean(norms[:, 0]),
        l0_std=_sample_std(norms[:, 0]),
        l2_mean=_mean(norms[:, 1]),
        l2_std=_sample_std(norms[:, 1]),
        linf_mean=_mean(norms[:, 2]),
        linf_std=_sample_std(norms[:, 2]),
        lower_l0=float(lower[0]),
        lower_l2=float(lower[1]),
        lower_linf=float(lower[2]),
    )


def aggregate(records: Iterable[TransferRecord]) -> list[CellAggregate]:
    """
    Per-cell statistics over retained records, plus a pooled family that
    combines every localized family at each fraction.

    Cells are the product of the (source, target) pairs and the (family,
    fraction) configurations present in ``records``; a cell without retained
    records is emitted with n = 0 and NaN statistics.
    """
    records = list(records)
    baseline_norms: dict[tuple[str, int], NormTriple] = {}
    for record in records:
        if record.family == BASELINE_FAMILY:
            baseline_norms[(record.source, record.image_id)] = record.norms

    pairs = sorted({(r.source, r.target) for r in records})
    configs = {(r.family, r.fraction) for r in records}
    localized_fractions = {f for family, f in configs if family != BASELINE_FAMILY}
    configs |= {(POOLED_FAMILY, f) for f in localized_fractions}
    ordered = sorted(configs, key=lambda c: (FAMILY_ORDER.get(c[0], 99), c[1]))

    cells: dict[tuple[str, str, str, float], list[TransferRecord]] = {
        (source, target, family, fraction): []
        for source, target in pairs
        for family, fraction in ordered
    }
    for record in records:
        if not record.retained:
            continue
        cells[(record.source, record.target, record.family, record.fraction)].append(
            record
        )
        if record.family != BASELINE_FAMILY:
            pooled = (record.source, record.target, POOLED_FAMILY, record.fraction)
            cells[pooled].append(record)

    return [_cell(key, members, baseline_norms) for key, members in cells.items()]


def sort_records(records: Iterable[TransferRecord]) -> list[TransferRecord]:
    return sorted(records, key=lambda r: r.sort_key)


def run_protocol(
    models: Sequence[Model],
    test_data: LabelledDataset,
    attack_cfg: AttackConfig,
    protocol: ProtocolConfig,
    image_size: int = 32,
) -> ProtocolResult:
    """
    Run baselines and localized variants with every model as source and
    every model (itself included) as target.

    Raises:
        InsufficientPoolError: If ``pool_size`` exceeds the clean-correct pool.
    """
    pool = clean_correct_pool(test_data, models)
    wanted = len(pool) if protocol.pool_size is None else protocol.pool_size
    images = select_eval_images(test_data, models, wanted, protocol.seed)
    masks = protocol_masks(
        image_size, protocol.seed, protocol.families, protocol.fractions
    )
    logger.info(
        "Protocol on %d of %d clean-correct images with %d masks",
        len(images),
        len(pool),
        len(masks),
    )

    run = partial(
        run_baseline,
        cfg=attack_cfg,
        n_transfer=protocol.n_transfer,
        seed=protocol.seed,
        targeted_transfer=protocol.targeted_transfer,
        workers=protocol.workers,
        chunk_size=protocol.chunk_size,
    )
    records: list[TransferRecord] = []
    for source in models:
        baseline = run(source, models, images)
        localized = run_localized(
            source,
            models,
            images,
            baseline,
            masks,
            attack_cfg,
            targeted_transfer=protocol.targeted_transfer,
            workers=protocol.workers,
        )
        records.extend(baseline)
        records.extend(localized)

    records = sort_records(records)
    return ProtocolResult(
        records=records,
        aggregates=aggregate(records),
        images=images,
        masks=masks,
        pool_size=len(pool),
    )
