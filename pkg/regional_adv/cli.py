import logging
from contextlib import contextmanager
from dataclasses import replace
from pathlib import Path
from typing import Any, Callable, Iterator

import click
import numpy as np
from omegaconf import DictConfig

from regional_adv import ConfigError, load_settings
from regional_adv.attack import (
    AttackConfig,
    SignConvention,
    TargetStrategy,
    run_attack,
)
from regional_adv.data import (
    LabelledDataset,
    fetch_cifar,
    generate_synthetic,
    load_cifar_binary,
    load_cifar_dir,
    save_cifar_binary,
)
from regional_adv.experiment import (
    POOLED_FAMILY,
    ProtocolConfig,
    aggregate,
    run_protocol,
    target_seed,
)
from regional_adv.helper import format_outcome, format_transfer_matrix
from regional_adv.masks import MaskFamily, MaskSpec, build_mask
from regional_adv.netpbm import write_ppm
from regional_adv.reports import (
    emit_reports,
    export_exemplars,
    read_records,
    triptych,
    write_model_accuracy,
)
from regional_adv.tensor import Precision
from regional_adv.zoo import (
    ArchitectureId,
    Model,
    TrainConfig,
    build,
    evaluate_accuracy,
    factory,
    load,
    save,
    train,
    write_training_log,
)

logger = logging.getLogger(__name__)

LOG_LEVELS = ["DEBUG", "INFO", "WARNING", "ERROR"]


@contextmanager
def diagnostics() -> Iterator[None]:
    """Turn library failures into a one-line CLI error (exit code 1)."""
    try:
        yield
    except (ValueError, RuntimeError, OSError, KeyError) as e:
        raise click.ClickException(str(e)) from e


def derive_seed(seed: int, *keys: int) -> int:
    return int(np.random.SeedSequence([seed, *keys]).generate_state(1)[0])


_COMMON_OPTIONS = [
    click.option(
        "--config",
        "config_path",
        type=click.Path(exists=True, dir_okay=False, path_type=Path),
        help="Line-oriented 'key = value' settings file",
    ),
    click.option("--seed", type=int, help="Run seed"),
    click.option("--out", type=click.Path(path_type=Path), help="Workspace directory"),
    click.option(
        "--log-level",
        type=click.Choice(LOG_LEVELS, case_sensitive=False),
        help="Logging level (default WARNING)",
    ),
]


def common_options(func: Callable[..., Any]) -> Callable[..., Any]:
    """
    --config/--seed/--out/--log-level, accepted both before and after the
    subcommand; values given after it win.
    """
    for option in reversed(_COMMON_OPTIONS):
        func = option(func)
    return func


def resolve_settings(
    ctx: click.Context,
    config_path: Path | None,
    seed: int | None,
    out: Path | None,
    log_level: str | None,
    overrides: list[str] | None = None,
) -> DictConfig:
    outer = ctx.find_root().params
    config_path = config_path or outer.get("config_path")
    seed = seed if seed is not None else outer.get("seed")
    out = out or outer.get("out")
    log_level = log_level or outer.get("log_level") or "WARNING"
    logging.basicConfig(
        level=log_level.upper(),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        force=True,
    )

    dotlist = []
    if seed is not None:
        dotlist.append(f"seed={seed}")
    if out is not None:
        dotlist.append(f"out={out}")
    dotlist.extend(overrides or [])
    try:
        return load_settings(config_path, dotlist)
    except ConfigError as e:
        raise click.ClickException(str(e)) from e


def workspace(settings: DictConfig) -> Path:
    return Path(settings.out)


def attack_config(settings: DictConfig) -> AttackConfig:
    section = settings.attack
    return AttackConfig(
        alpha=float(section.alpha),
        max_iterations=int(section.max_iterations),
        target_strategy=TargetStrategy(section.target_strategy),
        fixed_class=section.fixed_class,
        sign_convention=SignConvention(section.sign_convention),
        stop_on_source_success=bool(section.stop_on_source_success),
        epsilon=None if section.epsilon is None else float(section.epsilon),
    )


def protocol_config(settings: DictConfig) -> ProtocolConfig:
    section = settings.protocol
    return ProtocolConfig(
        n_transfer=int(section.n_transfer),
        pool_size=None if section.pool_size is None else int(section.pool_size),
        families=tuple(MaskFamily(f) for f in section.families),
        fractions=tuple(float(f) for f in section.fractions),
        targeted_transfer=bool(section.targeted_transfer),
        workers=int(section.workers),
        seed=int(settings.seed),
        chunk_size=int(section.chunk_size),
    )


def prepare_data(
    settings: DictConfig, download: bool = False
) -> tuple[LabelledDataset, LabelledDataset]:
    """Materialize train.bin/test.bin in the workspace from the configured source."""
    data_dir = workspace(settings) / "data"
    data_dir.mkdir(parents=True, exist_ok=True)
    source = settings.data.source
    if source == "synthetic":
        seed = int(settings.seed)
        train_set = generate_synthetic(
            int(settings.data.n_train), derive_seed(seed, 0), "train"
        )
        test_set = generate_synthetic(
            int(settings.data.n_test), derive_seed(seed, 1), "test"
        )
    elif source == "cifar":
        cifar_dir = settings.data.cifar_dir
        if cifar_dir is None:
            if not download:
                raise ValueError(
                    "CIFAR-10 source needs data.cifar_dir or --download"
                )
            cifar_dir = fetch_cifar(
                data_dir / "cifar",
                settings.data.cifar_url,
                max_retries=int(settings.download.max_retries),
                retry_delay=float(settings.download.retry_delay),
                timeout=int(settings.download.timeout),
            )
        train_set, test_set = load_cifar_dir(Path(cifar_dir))
    else:
        raise ValueError(f"unknown data source {source!r}")

    save_cifar_binary(train_set, data_dir / "train.bin")
    save_cifar_binary(test_set, data_dir / "test.bin")
    return train_set, test_set


def load_data(settings: DictConfig) -> tuple[LabelledDataset, LabelledDataset]:
    data_dir = workspace(settings) / "data"
    if not (data_dir / "train.bin").exists() or not (data_dir / "test.bin").exists():
        logger.info("No prepared data in %s; preparing it", data_dir)
        return prepare_data(settings)
    return (
        load_cifar_binary(data_dir / "train.bin", split="train"),
        load_cifar_binary(data_dir / "test.bin", split="test"),
    )


def train_model(
    settings: DictConfig,
    arch: ArchitectureId,
    train_set: LabelledDataset,
    test_set: LabelledDataset,
) -> Model:
    section = settings.train
    seed = derive_seed(int(settings.seed), 2, factory.available_types().index(arch))
    cfg = TrainConfig(
        epochs=int(section.epochs),
        batch_size=int(section.batch_size),
        learning_rate=float(section.learning_rate),
        momentum=float(section.momentum),
        seed=seed,
        precision=Precision(section.precision),
    )
    model = build(arch, seed, cfg.precision)
    model, log = train(model, train_set, cfg, test_set)

    models_dir = workspace(settings) / "models"
    models_dir.mkdir(parents=True, exist_ok=True)
    save(model, models_dir / f"{arch.value}.lpwt")
    write_training_log(log, models_dir / f"{arch.value}_train_log.csv")
    return model


def load_or_train(
    settings: DictConfig,
    arch: ArchitectureId,
    train_set: LabelledDataset,
    test_set: LabelledDataset,
) -> Model:
    path = workspace(settings) / "models" / f"{arch.value}.lpwt"
    if path.exists():
        return load(path)
    logger.info("No weights at %s; training %s", path, arch.value)
    return train_model(settings, arch, train_set, test_set)


def echo_pooled_matrices(aggregates: list, fractions: list[float]) -> None:
    for fraction in fractions:
        click.echo(format_transfer_matrix(aggregates, fraction, POOLED_FAMILY))
        click.echo("")


@click.group()
@common_options
@click.pass_context
def main(
    ctx: click.Context,
    config_path: Path | None,
    seed: int | None,
    out: Path | None,
    log_level: str | None,
) -> None:
    """Localized adversarial examples and their transfer between models."""


@main.group()
def data() -> None:
    """Dataset preparation."""


@data.command("prepare")
@common_options
@click.option(
    "--source",
    type=click.Choice(["synthetic", "cifar"]),
    help="Image source (default from config)",
)
@click.option("--download", is_flag=True, help="Download CIFAR-10 if needed")
@click.option(
    "--cifar-dir",
    type=click.Path(exists=True, file_okay=False, path_type=Path),
    help="Directory holding the CIFAR-10 binary batches",
)
@click.pass_context
def data_prepare(
    ctx: click.Context,
    config_path: Path | None,
    seed: int | None,
    out: Path | None,
    log_level: str | None,
    source: str | None,
    download: bool,
    cifar_dir: Path | None,
) -> None:
    """Write train.bin and test.bin into the workspace."""
    overrides = []
    if source is not None:
        overrides.append(f"data.source={source}")
    if cifar_dir is not None:
        overrides.append(f"data.cifar_dir={cifar_dir}")
    settings = resolve_settings(ctx, config_path, seed, out, log_level, overrides)
    with diagnostics():
        train_set, test_set = prepare_data(settings, download=download)
    click.echo(
        f"Prepared {len(train_set)} training and {len(test_set)} test images "
        f"in {workspace(settings) / 'data'}"
    )


@main.command("train")
@common_options
@click.option(
    "--arch",
    type=click.Choice([a.value for a in factory.available_types()]),
    required=True,
    help="Architecture to train",
)
@click.pass_context
def train_command(
    ctx: click.Context,
    config_path: Path | None,
    seed: int | None,
    out: Path | None,
    log_level: str | None,
    arch: str,
) -> None:
    """Train one architecture and save its weights."""
    settings = resolve_settings(ctx, config_path, seed, out, log_level)
    with diagnostics():
        train_set, test_set = load_data(settings)
        model = train_model(settings, ArchitectureId(arch), train_set, test_set)
        accuracy = evaluate_accuracy(model, test_set)
    click.echo(f"{arch}: test accuracy {accuracy:.4f}")


@main.command("attack")
@common_options
@click.option(
    "--arch",
    type=click.Choice([a.value for a in factory.available_types()]),
    required=True,
    help="Source model",
)
@click.option("--image-index", type=int, default=0, help="Row in the test split")
@click.option(
    "--family",
    type=click.Choice([f.value for f in MaskFamily]),
    default=MaskFamily.FULL.value,
    help="Localization mask family",
)
@click.option("--fraction", type=float, default=1.0, help="Mask pixel fraction")
@click.option("--target", type=int, help="Target class (default from strategy)")
@click.pass_context
def attack_command(
    ctx: click.Context,
    config_path: Path | None,
    seed: int | None,
    out: Path | None,
    log_level: str | None,
    arch: str,
    image_index: int,
    family: str,
    fraction: float,
    target: int | None,
) -> None:
    """Attack one test image and dump the result as PPM."""
    settings = resolve_settings(ctx, config_path, seed, out, log_level)
    with diagnostics():
        train_set, test_set = load_data(settings)
        if not 0 <= image_index < len(test_set):
            raise ValueError(
                f"image index {image_index} outside the {len(test_set)} test images"
            )
        model = load_or_train(settings, ArchitectureId(arch), train_set, test_set)
        image = test_set.images[image_index]
        true_label = int(test_set.labels[image_index])
        run_seed = int(settings.seed)

        mask = None
        if MaskFamily(family) is not MaskFamily.FULL:
            mask = build_mask(
                MaskSpec(
                    MaskFamily(family),
                    fraction,
                    seed=derive_seed(run_seed, 3),
                    size=image.shape[-1],
                )
            )
        cfg = replace(
            attack_config(settings),
            mask=mask,
            target_seed=target_seed(run_seed, int(test_set.ids[image_index])),
        )
        if target is not None:
            cfg = replace(
                cfg, target_strategy=TargetStrategy.FIXED, fixed_class=target
            )
        outcome = run_attack(model, image, cfg)

        label = "full" if mask is None else mask.spec.label
        attack_dir = workspace(settings) / "attack"
        attack_dir.mkdir(parents=True, exist_ok=True)
        stem = f"{arch}_{image_index}_{label}"
        write_ppm(outcome.adversarial, attack_dir / f"{stem}_adversarial.ppm")
        write_ppm(
            triptych(outcome.original, mask, outcome.adversarial),
            attack_dir / f"{stem}_triptych.ppm",
        )
        if mask is not None:
            mask.write_pgm(attack_dir / f"{stem}_mask.pgm")

    click.echo(format_outcome(outcome, true_label))
    click.echo(f"Images written to {attack_dir}")


@main.command("transfer")
@common_options
@click.option(
    "--targeted-transfer",
    is_flag=True,
    help="Count a transfer only when the target model outputs the target class",
)
@click.pass_context
def transfer_command(
    ctx: click.Context,
    config_path: Path | None,
    seed: int | None,
    out: Path | None,
    log_level: str | None,
    targeted_transfer: bool,
) -> None:
    """Run the full protocol: baselines, localized variants and reports."""
    overrides = []
    if targeted_transfer:
        overrides.append("protocol.targeted_transfer=true")
    settings = resolve_settings(ctx, config_path, seed, out, log_level, overrides)
    with diagnostics():
        train_set, test_set = load_data(settings)
        architectures = [ArchitectureId(a) for a in settings.protocol.architectures]
        models = [
            load_or_train(settings, a, train_set, test_set) for a in architectures
        ]
        protocol = protocol_config(settings)
        attack_cfg = attack_config(settings)
        result = run_protocol(models, test_set, attack_cfg, protocol)

        reports_dir = workspace(settings) / "reports"
        emit_reports(
            result.aggregates, result.records, reports_dir, protocol.n_transfer
        )
        write_model_accuracy(
            {m.architecture.value: evaluate_accuracy(m, test_set) for m in models},
            result.pool_size,
            reports_dir / "model_accuracy.csv",
        )
        if settings.protocol.exemplars:
            export_exemplars(
                models,
                result.images,
                result.records,
                result.masks,
                attack_cfg,
                reports_dir,
            )

    echo_pooled_matrices(result.aggregates, list(protocol.fractions))
    click.echo(f"Reports written to {reports_dir}")


@main.command("report")
@common_options
@click.option(
    "--records",
    "records_path",
    type=click.Path(exists=True, dir_okay=False, path_type=Path),
    help="records.csv to aggregate (default: the workspace's reports/records.csv)",
)
@click.option(
    "--n-transfer",
    type=click.IntRange(min=1),
    help="Images requested per pair when the records were made; "
    "without it the summary leaves requested and shortfall blank",
)
@click.pass_context
def report_command(
    ctx: click.Context,
    config_path: Path | None,
    seed: int | None,
    out: Path | None,
    log_level: str | None,
    records_path: Path | None,
    n_transfer: int | None,
) -> None:
    """Recompute every table from a records.csv."""
    settings = resolve_settings(ctx, config_path, seed, out, log_level)
    reports_dir = workspace(settings) / "reports"
    with diagnostics():
        records = read_records(records_path or reports_dir / "records.csv")
        aggregates = aggregate(records)
        emit_reports(aggregates, records, reports_dir, n_transfer)

    fractions = sorted({a.fraction for a in aggregates if a.family == POOLED_FAMILY})
    echo_pooled_matrices(aggregates, fractions)
    click.echo(f"Reports written to {reports_dir}")


if __name__ == "__main__":
    main()
