"""Run profiles and settings resolution.

Settings come from four layers, later ones winning: the profile defaults,
``ATTN_BENCH_*`` environment variables (a ``.env`` file is loaded by the CLI),
command-line flags, and finally the ``--config`` file. A key set both
explicitly on the command line and in the config file must agree.
"""

import json
import logging
import os
from pathlib import Path
from typing import Any, Callable, Dict, Iterable, List, Mapping, Optional, Set, Union

from attention_bench.attention import VARIANTS, AttentionSpec, check_variant
from attention_bench.exceptions import ConfigError

logger = logging.getLogger(__name__)

ENV_PREFIX = "ATTN_BENCH_"

PROFILES: Dict[str, Dict[str, Any]] = {
    "desk": {
        "n_layers": 2,
        "d_model": 128,
        "n_heads": 8,
        "d_ff": 512,
        "seq_len": 128,
        "batches": 40,
        "epochs": 5,
        "batch_size": 16,
    },
    "full": {
        "n_layers": 12,
        "d_model": 768,
        "n_heads": 12,
        "d_ff": 3072,
        "seq_len": 512,
        "batches": 400,
        "epochs": 20,
        "batch_size": 16,
    },
}

DEFAULTS: Dict[str, Any] = {
    "profile": "desk",
    "variants": list(VARIANTS),
    "seed": 0,
    "data": "synth",
    "power": "auto",
    "out": "bench_out",
    "lr": 3e-4,
    "window": 32,
    "n_buckets": 4,
    "n_rounds": 2,
    "n_kv_heads": None,
    "latent_dim": None,
    "tile": 64,
    "sample_period": 0.1,
    "inference_repeats": 10,
    "synth_docs": 1024,
    "save_checkpoints": False,
    "log_level": "INFO",
}


def _parse_bool(value: Union[str, bool]) -> bool:
    if isinstance(value, bool):
        return value
    lowered = str(value).strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {value!r}")


def parse_variants(value: Union[str, Iterable[str]]) -> List[str]:
    """Comma-separated (or listed) variant names, validated and de-duplicated in order."""
    names = value.split(",") if isinstance(value, str) else list(value)
    variants: List[str] = []
    for name in (n.strip() for n in names):
        if name and name not in variants:
            variants.append(check_variant(name))
    if not variants:
        raise ConfigError(f"No variants given. Valid variants: {', '.join(VARIANTS)}.")
    return variants


def _optional_int(value):
    if value is None or (isinstance(value, str) and value.strip().lower() in ("", "none", "null")):
        return None
    return int(value)


SETTING_TYPES: Dict[str, Callable[[Any], Any]] = {
    "profile": str,
    "variants": parse_variants,
    "epochs": int,
    "batches": int,
    "batch_size": int,
    "seq_len": int,
    "seed": int,
    "data": str,
    "power": str,
    "out": str,
    "n_layers": int,
    "d_model": int,
    "n_heads": int,
    "d_ff": int,
    "lr": float,
    "window": int,
    "n_buckets": int,
    "n_rounds": int,
    "n_kv_heads": _optional_int,
    "latent_dim": _optional_int,
    "tile": int,
    "sample_period": float,
    "inference_repeats": int,
    "synth_docs": int,
    "save_checkpoints": _parse_bool,
    "log_level": lambda v: str(v).upper(),
}


def normalize_key(key: str) -> str:
    return key.strip().lstrip("-").replace("-", "_").lower()


def coerce(key: str, value: Any) -> Any:
    """Convert ``value`` to the type of setting ``key``.

    Raises:
        ConfigError: For unknown keys or values of the wrong type.
    """
    key = normalize_key(key)
    if key not in SETTING_TYPES:
        raise ConfigError(f"Unknown setting '{key}'.")
    try:
        return SETTING_TYPES[key](value)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"Invalid value {value!r} for '{key}': {exc}") from None


def load_config_file(path: Union[str, Path]) -> Dict[str, Any]:
    """Read a JSON object or ``key=value`` lines (``#`` starts a comment).

    Keys are long flag names, with ``-`` or ``_``.

    Raises:
        ConfigError: If the file cannot be read or parsed.
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"Cannot read config file {path}: {exc}") from exc
    if text.lstrip().startswith("{"):
        try:
            raw = json.loads(text)
        except ValueError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: the JSON config must be an object.")
        items = raw.items()
    else:
        items = []
        for number, line in enumerate(text.splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{number}: expected key=value, got '{line}'.")
            key, value = line.split("=", 1)
            items.append((key.strip(), value.strip()))
    return {normalize_key(key): coerce(key, value) for key, value in items}


def environment_settings(environ: Optional[Mapping[str, str]] = None) -> Dict[str, Any]:
    """Settings given as ``ATTN_BENCH_<KEY>`` environment variables."""
    environ = os.environ if environ is None else environ
    settings = {}
    for key in SETTING_TYPES:
        name = ENV_PREFIX + key.upper()
        if name in environ:
            settings[key] = coerce(key, environ[name])
    return settings


def resolve_settings(
    flags: Mapping[str, Any],
    explicit: Optional[Set[str]] = None,
    config_path: Optional[Union[str, Path]] = None,
    environ: Optional[Mapping[str, str]] = None,
) -> Dict[str, Any]:
    """Merge profile, environment, flags and config file into one settings dict.

    Args:
        flags (Mapping[str, Any]): Values from the command line; None means unset.
        explicit (Optional[Set[str]], optional): Keys the user actually typed.
            Defaults to every key of ``flags`` with a value.
        config_path (Optional[Union[str, Path]], optional): The ``--config`` file.
        environ (Optional[Mapping[str, str]], optional): Defaults to ``os.environ``.

    Raises:
        ConfigError: On unknown profiles, invalid values, or a config file value
            that contradicts an explicit flag.

    Returns:
        Dict[str, Any]: Every setting, typed.
    """
    flag_values = {
        normalize_key(k): coerce(k, v) for k, v in flags.items() if v is not None
    }
    explicit = set(flag_values) if explicit is None else {normalize_key(k) for k in explicit}
    env_values = environment_settings(environ)
    file_values = load_config_file(config_path) if config_path else {}

    for key, value in file_values.items():
        if key in explicit and key in flag_values and flag_values[key] != value:
            raise ConfigError(
                f"Conflicting values for '{key}': {flag_values[key]!r} on the command line, "
                f"{value!r} in {config_path}."
            )

    profile = file_values.get(
        "profile", flag_values.get("profile", env_values.get("profile", DEFAULTS["profile"]))
    )
    if profile not in PROFILES:
        raise ConfigError(f"Unknown profile '{profile}'. Choose from {', '.join(PROFILES)}.")

    settings: Dict[str, Any] = dict(DEFAULTS)
    settings.update(PROFILES[profile])
    settings.update(env_values)
    settings.update(flag_values)
    settings.update(file_values)
    settings["profile"] = profile
    return settings


def grouped_kv_heads(n_heads: int) -> int:
    """Largest divisor of ``n_heads`` that is at most half of it (1 for a single head)."""
    for candidate in range(max(1, n_heads // 2), 0, -1):
        if n_heads % candidate == 0:
            return candidate
    return 1


def default_attention_spec(variant: str, n_heads: int, d_model: int, **overrides) -> AttentionSpec:
    """Attention hyperparameters used by the benchmark for ``variant``.

    gqa groups query heads in pairs (see :func:`grouped_kv_heads`), sliding
    windows span 32 tokens, lsh hashes into 4 buckets over 2 rounds, mla compresses keys and
    values into ``d_model // 2`` latents and flash uses 64 x 64 tiles.
    None-valued overrides fall back to these defaults.
    """
    check_variant(variant)
    if d_model % n_heads:
        raise ConfigError(f"d_model={d_model} is not divisible by n_heads={n_heads}.")
    head_dim = d_model // n_heads
    values = {
        "n_kv_heads": grouped_kv_heads(n_heads),
        "window": 32,
        "n_buckets": 4,
        "n_rounds": 2,
        "latent_dim": max(1, d_model // 2),
        "tile_q": 64,
        "tile_kv": 64,
    }
    values.update({k: v for k, v in overrides.items() if v is not None})
    return AttentionSpec(variant=variant, n_heads=n_heads, head_dim=head_dim, **values)
