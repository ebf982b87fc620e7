"""
Logging, environment and run-config plumbing shared by every hamogen module.
"""

import os
import json
import logging
from typing import Dict, Optional

from errors import ConfigError

# Load environment variables
try:
    from dotenv import load_dotenv
    load_dotenv()
except ImportError:
    pass

CONFIG_VERSION = 1
LOG_FORMAT = '%(asctime)s - %(levelname)s - %(message)s'

logger = logging.getLogger(__name__)


def configure_logging(level: Optional[str] = None):
    """Configure root logging once; level comes from the argument or HAMOGEN_LOG_LEVEL"""
    level_name = (level or os.environ.get('HAMOGEN_LOG_LEVEL', 'INFO')).upper()
    numeric_level = getattr(logging, level_name, None)
    if not isinstance(numeric_level, int):
        raise ConfigError(f"Unknown log level: {level_name}")
    logging.basicConfig(level=numeric_level, format=LOG_FORMAT)
    logging.getLogger().setLevel(numeric_level)


def worker_count() -> int:
    """Worker pool size, capped by HAMOGEN_THREADS"""
    default = os.cpu_count() or 1
    raw = os.environ.get('HAMOGEN_THREADS')
    if raw is None or raw.strip() == '':
        return max(1, default)
    try:
        value = int(raw)
    except ValueError:
        raise ConfigError(f"HAMOGEN_THREADS must be an integer, got {raw!r}")
    return max(1, min(value, default))


def load_run_config(path: str, defaults: Dict, section: str) -> Dict:
    """
    Read a JSON run config and merge it over defaults

    Args:
        path: JSON file with a `version` field
        defaults: allowed keys and their default values
        section: name used in error messages (e.g. 'dataset')

    Returns:
        Resolved config dictionary, `version` included
    """
    try:
        with open(path, 'r') as f:
            raw = json.load(f)
    except FileNotFoundError:
        raise ConfigError(f"Config file {path} not found")
    except json.JSONDecodeError as e:
        raise ConfigError(f"Config file {path} is not valid JSON: {e}")

    if not isinstance(raw, dict):
        raise ConfigError(f"{section} config must be a JSON object")
    return resolve_config(raw, defaults, section)


def resolve_config(raw: Dict, defaults: Dict, section: str) -> Dict:
    """Validate version and keys of an already-parsed config"""
    version = raw.get('version')
    if version != CONFIG_VERSION:
        raise ConfigError(f"{section} config version must be {CONFIG_VERSION}, got {version!r}")

    unknown = sorted(set(raw) - set(defaults) - {'version'})
    if unknown:
        raise ConfigError(f"Unknown {section} config key: {unknown[0]}", {'unknown_keys': unknown})

    resolved = dict(defaults)
    resolved.update(raw)
    logger.debug(f"Resolved {section} config: {resolved}")
    return resolved


def write_resolved_config(out_dir: str, config: Dict) -> str:
    """Echo the resolved config into an output directory"""
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, 'resolved_config.json')
    with open(path, 'w') as f:
        json.dump(config, f, indent=2, sort_keys=True)
    return path
