"""TOML run configs: loading, ``--set`` overrides, snapshots and content hashes."""

from __future__ import annotations

import copy
import hashlib
from pathlib import Path

import tomli
import tomli_w

from .training import ConfigError, TrainConfig


def parse_value(text):
    """Interpret an override value as a TOML value, falling back to a bare string."""
    try:
        return tomli.loads(f"v = {text}")["v"]
    except tomli.TOMLDecodeError:
        return text


def apply_overrides(raw, overrides):
    raw = copy.deepcopy(raw)
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, value = item.split("=", 1)
        parts = key.strip().split(".")
        node = raw
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {item!r}: {p!r} is not a table")
        node[parts[-1]] = parse_value(value.strip())
    return raw


def read_raw(path):
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config ({exc.strerror})") from exc
    try:
        return tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}: {exc.msg}") from exc


def build_config(raw, source="<config>"):
    try:
        return TrainConfig.from_dict(raw)
    except ConfigError as exc:
        raise ConfigError(f"{source}: {exc}") from exc


def load_config(path, overrides=()):
    raw = apply_overrides(read_raw(path), overrides)
    return build_config(raw, str(path)), raw


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items() if v is not None}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if hasattr(obj, "item"):
        return obj.item()
    return obj


def dump_config(config):
    """Canonical TOML text for a resolved config (keys sorted for stable hashes)."""
    d = config.to_dict() if isinstance(config, TrainConfig) else config
    return tomli_w.dumps(_sorted(_plain(d)))


def _sorted(d):
    if isinstance(d, dict):
        return {k: _sorted(d[k]) for k in sorted(d)}
    return d


def content_hash(text):
    """Git blob hash of a text, used as the config fingerprint."""
    data = text.encode("utf-8")
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def fingerprint(config):
    return content_hash(dump_config(config))
