"""Вспомогательные функции: плоский key-value формат конфигов, хэш, сиды"""

import hashlib
import logging
import typing
from pathlib import Path
from typing import Any, Dict, Type, TypeVar

import torch
from pydantic import BaseModel, ValidationError

from zest.errors import ConfigError

logger = logging.getLogger(__name__)

ModelT = TypeVar("ModelT", bound=BaseModel)

CONFIG_HEADER = "# zest resolved config (key = value, dotted keys for nested sections)"


def _format_value(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (list, tuple)):
        return ",".join(_format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def flatten_model(model: BaseModel) -> Dict[str, str]:
    """Модель → плоский словарь {dotted.key: строка} в порядке объявления полей"""
    flat: Dict[str, str] = {}

    def _walk(prefix: str, obj: BaseModel) -> None:
        for name in type(obj).model_fields:
            value = getattr(obj, name)
            key = f"{prefix}{name}"
            if isinstance(value, BaseModel):
                _walk(f"{key}.", value)
            else:
                flat[key] = _format_value(value)

    _walk("", model)
    return flat


def format_flat(flat: Dict[str, str]) -> str:
    lines = [CONFIG_HEADER]
    lines.extend(f"{key} = {value}" for key, value in flat.items())
    return "\n".join(lines) + "\n"


def parse_flat(text: str, source: str = "<config>") -> Dict[str, str]:
    """
    Разбор текста `key = value`

    Пустые строки и строки с # пропускаются; повтор ключа и строка без '='
    дают ошибку с номером строки.
    """
    flat: Dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        if key in flat:
            raise ConfigError(f"{source}:{lineno}: duplicate key '{key}'", key=key)
        flat[key] = value
    return flat


def _field_kind(annotation: Any) -> str:
    origin = typing.get_origin(annotation)
    if origin is typing.Union:
        args = [a for a in typing.get_args(annotation) if a is not type(None)]
        inner = _field_kind(args[0]) if len(args) == 1 else "scalar"
        return f"optional_{inner}" if not inner.startswith("optional_") else inner
    if origin in (list, tuple, typing.List, typing.Tuple):
        return "sequence"
    if isinstance(annotation, type) and issubclass(annotation, BaseModel):
        return "model"
    return "scalar"


def _coerce(model_cls: Type[BaseModel], raw: Dict[str, Any], prefix: str) -> Dict[str, Any]:
    """Строки плоского файла → значения, понятные pydantic (списки, None, вложенные)"""
    out: Dict[str, Any] = {}
    fields = model_cls.model_fields
    for name, value in raw.items():
        field = fields.get(name)
        if field is None:
            # пусть pydantic сообщит про лишний ключ
            out[name] = value
            continue
        kind = _field_kind(field.annotation)
        if kind == "model":
            if not isinstance(value, dict):
                raise ConfigError(f"'{prefix}{name}' is a section, use dotted keys", key=f"{prefix}{name}")
            out[name] = _coerce(field.annotation, value, f"{prefix}{name}.")
        elif isinstance(value, dict):
            raise ConfigError(f"'{prefix}{name}' is not a section", key=f"{prefix}{name}")
        elif kind.startswith("optional_") and value == "":
            out[name] = None
        elif kind.endswith("sequence"):
            out[name] = [v.strip() for v in value.split(",") if v.strip()]
        else:
            out[name] = value
    return out


def _unflatten(flat: Dict[str, str]) -> Dict[str, Any]:
    nested: Dict[str, Any] = {}
    for key, value in flat.items():
        parts = key.split(".")
        node = nested
        for part in parts[:-1]:
            child = node.setdefault(part, {})
            if not isinstance(child, dict):
                raise ConfigError(f"key '{key}' conflicts with a scalar value", key=key)
            node = child
        node[parts[-1]] = value
    return nested


def model_from_flat(model_cls: Type[ModelT], flat: Dict[str, str]) -> ModelT:
    """Плоский словарь → модель; ошибки валидации называют ключ"""
    data = _coerce(model_cls, _unflatten(flat), "")
    try:
        return model_cls.model_validate(data)
    except ValidationError as e:
        first = e.errors()[0]
        key = ".".join(str(p) for p in first["loc"])
        if first["type"] == "extra_forbidden":
            raise ConfigError(f"unknown config key '{key}'", key=key) from e
        raise ConfigError(f"invalid value for '{key}': {first['msg']}", key=key) from e


def load_config(model_cls: Type[ModelT], path: str) -> ModelT:
    config_path = Path(path)
    try:
        text = config_path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read config {config_path}: {e}") from e
    return model_from_flat(model_cls, parse_flat(text, str(config_path)))


def save_config(model: BaseModel, path: str) -> Path:
    config_path = Path(path)
    config_path.parent.mkdir(parents=True, exist_ok=True)
    config_path.write_text(format_flat(flatten_model(model)), encoding="utf-8")
    logger.debug(f"Resolved config written to {config_path}")
    return config_path


def config_hash(model: BaseModel) -> str:
    """SHA-256 канонического плоского текста конфига"""
    text = format_flat(flatten_model(model))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def make_generator(seed: int, device: str = "cpu") -> torch.Generator:
    """Отдельный генератор: стохастика пайплайна не зависит от глобального RNG"""
    generator = torch.Generator(device=device)
    generator.manual_seed(seed)
    return generator
