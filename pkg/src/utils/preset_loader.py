from pathlib import Path
from typing import Any, Dict, List, Optional

import yaml
from loguru import logger

from config import settings


def presets_dir() -> Path:
    return Path(settings.PRESETS_DIR)


def list_presets() -> List[str]:
    return sorted(p.stem for p in presets_dir().glob("*.yaml"))


def load_preset(name: str, key: Optional[str] = None) -> Dict[str, Any]:
    """
    Load a hyperparameter preset from YAML.

    Args:
        name: Preset name (matches the YAML filename, e.g. 'wine')
        key: Optional section for multi-model files (e.g. 'gam' or 'ga2m')

    Returns:
        Flat mapping of RunConfig keys to values

    Raises:
        FileNotFoundError: If the preset file doesn't exist
        KeyError: If key is not found in the preset
    """
    preset_file = presets_dir() / f"{name}.yaml"

    if not preset_file.exists():
        raise FileNotFoundError(f"Preset file not found: {preset_file}")

    with open(preset_file, 'r', encoding='utf-8') as f:
        preset_data = yaml.safe_load(f) or {}

    if key:
        if key not in preset_data:
            raise KeyError(f"Preset key '{key}' not found in {preset_file}")
        preset_data = preset_data[key]

    if not isinstance(preset_data, dict):
        raise KeyError(f"Preset {name} is not a mapping")
    sections = sorted(k for k, v in preset_data.items() if isinstance(v, dict))
    if sections:
        raise KeyError(f"Preset {name} needs a section key; available: {sections}")

    logger.debug(f"Loaded preset: {name}" + (f".{key}" if key else ""))
    return dict(preset_data)
