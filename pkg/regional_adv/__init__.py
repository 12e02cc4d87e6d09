from pathlib import Path
from typing import Sequence, cast

from omegaconf import DictConfig, OmegaConf
from omegaconf.errors import OmegaConfBaseException


class ConfigError(ValueError):
    """Raised for malformed or unknown configuration entries."""


def get_config() -> DictConfig:
    """
    Load and return configuration from config.yaml using OmegaConf.

    Returns:
        DictConfig: Configuration object from config.yaml
    """
    config_path: Path = Path(__file__).parent / "config.yaml"
    config = cast(DictConfig, OmegaConf.load(config_path))
    return config


def get_reference() -> DictConfig:
    """
    Load the published reference values from reference.yaml.

    Returns:
        DictConfig: Reference tables keyed by model role
    """
    reference_path: Path = Path(__file__).parent / "reference.yaml"
    return cast(DictConfig, OmegaConf.load(reference_path))


def parse_config_file(path: Path) -> list[str]:
    """
    Read a line-oriented ``key = value`` file into an OmegaConf dotlist.

    Blank lines and ``#`` comments are ignored. Keys are dotted paths into
    the packaged defaults, e.g. ``attack.alpha = 0.004``.

    Raises:
        ConfigError: If a line has no ``=`` or an empty key.
    """
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except OSError as e:
        raise ConfigError(f"Cannot read config file {path}: {e}") from e

    dotlist = []
    for number, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ConfigError(f"{path}:{number}: expected 'key = value', got {raw!r}")
        dotlist.append(f"{key}={value.strip()}")
    return dotlist


def load_settings(
    config_path: Path | None = None, overrides: Sequence[str] = ()
) -> DictConfig:
    """
    Packaged defaults, then the ``key = value`` file, then dotlist overrides.

    Raises:
        ConfigError: If a key is unknown or a value cannot be parsed.
    """
    settings = get_config()
    OmegaConf.set_struct(settings, True)
    layers = []
    if config_path is not None:
        layers.append((str(config_path), parse_config_file(config_path)))
    if overrides:
        layers.append(("command line", list(overrides)))

    for origin, dotlist in layers:
        try:
            settings = cast(
                DictConfig, OmegaConf.merge(settings, OmegaConf.from_dotlist(dotlist))
            )
        except OmegaConfBaseException as e:
            raise ConfigError(f"Invalid setting in {origin}: {e}") from e
    return settings
