# utils/config_manager.py
import configparser
import logging
import os

from core.errors import ConfigError
from core.experiment_config import ExperimentConfig

logger = logging.getLogger(__name__)


class ConfigManager:
    """INI-backed experiment configuration.

    Values are kept as strings section by section; `load_experiment()` validates them into an
    ExperimentConfig. Precedence: `set()`/overrides > file > model defaults.
    """

    def __init__(self, config_path=None):
        self.config = configparser.ConfigParser(interpolation=None)
        self.path = config_path

        if config_path is None:
            return
        if not os.path.exists(config_path):
            raise ConfigError(f"ConfigManager: config file not found: {config_path}")
        try:
            with open(config_path, "r", encoding="utf-8") as handle:
                self.config.read_file(handle)
        except (configparser.Error, UnicodeDecodeError) as e:
            raise ConfigError(f"ConfigManager: error reading config file {config_path}: {e}") from e
        logger.info(f"ConfigManager: loaded {config_path} ({len(self.config.sections())} sections).")

    @classmethod
    def from_experiment(cls, experiment: ExperimentConfig) -> "ConfigManager":
        manager = cls()
        for section, values in experiment.to_sections().items():
            manager.config[section] = values
        return manager

    def _ensure_section_exists(self, section_name):
        if section_name not in self.config:
            self.config[section_name] = {}

    def get(self, section, key, default=None):
        if section not in self.config:
            return default
        return self.config.get(section, key, fallback=default)

    def set(self, section, key, value):
        self._ensure_section_exists(section)
        self.config[section][key] = "" if value is None else str(value)

    def apply_overrides(self, overrides):
        """Applies `section.key=value` strings."""
        for item in overrides or ():
            target, sep, value = item.partition("=")
            section, dot, key = target.strip().partition(".")
            if not sep or not dot or not section or not key:
                raise ConfigError(f"ConfigManager: override '{item}' is not of the form section.key=value")
            self.set(section, key, value.strip())
            logger.debug(f"ConfigManager: override {section}.{key} = {value.strip()}")

    def as_sections(self) -> dict:
        return {section: dict(self.config[section]) for section in self.config.sections()}

    def load_experiment(self) -> ExperimentConfig:
        return ExperimentConfig.from_sections(self.as_sections())

    def save(self, path=None):
        path = path or self.path
        if path is None:
            raise ConfigError("ConfigManager: no path to save the configuration to")
        directory = os.path.dirname(os.path.abspath(path))
        try:
            os.makedirs(directory, exist_ok=True)
            with open(path, "w", encoding="utf-8") as configfile:
                self.config.write(configfile)
        except OSError as e:
            raise ConfigError(f"ConfigManager: error writing config file {path}: {e}") from e
        logger.info(f"ConfigManager: saved configuration to {path}")


def load_experiment_config(config_path=None, overrides=None) -> ExperimentConfig:
    """Reads `config_path` (defaults only when None), applies overrides and validates."""
    manager = ConfigManager(config_path)
    manager.apply_overrides(overrides)
    return manager.load_experiment()
