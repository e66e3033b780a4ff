import logging
import os
from functools import lru_cache
from pathlib import Path
from typing import Dict, Iterable

from kedro import __version__ as kedro_version
from kedro.config import MissingConfigException, TemplatedConfigLoader
from semver import VersionInfo

from .config import ExperimentConfig
from .errors import ConfigError

log = logging.getLogger(__name__)


class EnvTemplatedConfigLoader(TemplatedConfigLoader):
    """Config loader that fills ${name|default} placeholders from
    PHYSIO_CONFIG_<NAME> environment variables."""

    VAR_PREFIX = "PHYSIO_CONFIG_"
    # defaults provided so ${seed|7} style entries resolve without env
    ENV_DEFAULTS = {"seed": None}

    def __init__(self, conf_paths: Iterable[str]):
        super().__init__(conf_paths, globals_dict=self.read_env())

    def read_env(self) -> Dict:
        config = EnvTemplatedConfigLoader.ENV_DEFAULTS.copy()
        overrides = dict(
            [
                (k.replace(EnvTemplatedConfigLoader.VAR_PREFIX, "").lower(), v)
                for k, v in os.environ.copy().items()
                if k.startswith(EnvTemplatedConfigLoader.VAR_PREFIX)
            ]
        )
        config.update(**overrides)
        return {k: v for k, v in config.items() if v is not None}


class ContextHelper(object):
    """Resolves the experiment configuration of one CLI invocation.

    Precedence: command-line overrides, then the config file, then the
    preset.
    """

    CONFIG_FILE_PATTERN = "physio*"
    DEFAULT_CONF_PATH = "conf/base"

    def __init__(self, config_path=None, preset=None, overrides=None):
        self._config_path = config_path
        self._preset = preset
        self._overrides = overrides or {}

    @property
    def config_path(self):
        return self._config_path

    @property
    @lru_cache()
    def raw_config(self) -> Dict:
        if self._config_path is None:
            conf_dir = Path.cwd() / self.DEFAULT_CONF_PATH
            try:
                return EnvTemplatedConfigLoader([str(conf_dir)]).get(
                    self.CONFIG_FILE_PATTERN
                )
            except (MissingConfigException, ValueError):
                log.debug("No config under %s, using preset only", conf_dir)
                return {}
        path = Path(self._config_path)
        if not path.is_file():
            raise ConfigError(f"Config file not found: {path}")
        return EnvTemplatedConfigLoader([str(path.parent)]).get(path.name)

    @property
    @lru_cache()
    def config(self) -> ExperimentConfig:
        raw = dict(self.raw_config or {})
        preset = self._preset or raw.pop("preset", None) or "desk"
        raw.pop("preset", None)
        config = ExperimentConfig.from_preset(preset, raw)
        ablation = self._overrides.get("ablation")
        if ablation:
            config = config.with_ablation(ablation)
        overrides = {
            k: v for k, v in self._overrides.items() if k != "ablation"
        }
        return config.with_overrides(overrides).validate()

    @staticmethod
    def init(config_path=None, preset=None, overrides=None):
        version = VersionInfo.parse(kedro_version)
        if not version.match(">=0.17.0"):
            raise ConfigError(
                f"kedro {kedro_version} is not supported, need >= 0.17.0"
            )
        return ContextHelper(config_path, preset, overrides)
