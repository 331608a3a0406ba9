"""Plain-text run configuration.

Config files are UTF-8 ``key = value`` lines with ``#`` comments.
Command-line flags override file values.  Every key must be declared in
the active command's schema -- unknown keys are rejected so typos never
pass silently -- and each run writes its fully resolved configuration
next to its outputs.
"""

from pathlib import Path

REQUIRED = object()


class ConfigError(Exception):
    """Invalid, unknown or missing configuration."""


def parse_config_text(text):
    raw = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = stripped.split("=", 1)
        raw[key.strip()] = value.strip()
    return raw


def load_config_file(path):
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    return parse_config_text(path.read_text(encoding="utf-8"))


# -- value parsers ----------------------------------------------------------


def _int(s):
    return int(s)


def _float(s):
    return float(s)


def _str(s):
    return s


def _bool(s):
    low = s.strip().lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _float_list(s):
    items = [x.strip() for x in s.split(",") if x.strip()]
    if not items:
        raise ValueError("empty list")
    return [float(x) for x in items]


def _int_list(s):
    items = [x.strip() for x in s.split(",") if x.strip()]
    if not items:
        raise ValueError("empty list")
    return [int(x) for x in items]


def _str_list(s):
    items = [x.strip() for x in s.split(",") if x.strip()]
    if not items:
        raise ValueError("empty list")
    return items


def choice(*options):
    def parse(s):
        if s not in options:
            raise ValueError(f"must be one of {options}, got {s!r}")
        return s

    return parse


PARSERS = {
    "int": _int,
    "float": _float,
    "str": _str,
    "bool": _bool,
    "float_list": _float_list,
    "int_list": _int_list,
    "str_list": _str_list,
}


def resolve(schema, raw):
    """Validate raw string values against a schema.

    ``schema`` maps key -> (parser, default); ``REQUIRED`` defaults must
    be present.  Returns the typed config dict.
    """
    for key in raw:
        if key not in schema:
            raise ConfigError(f"unknown config key: {key}")
    resolved = {}
    for key, (parser, default) in schema.items():
        if key in raw:
            parse = PARSERS[parser] if isinstance(parser, str) else parser
            try:
                resolved[key] = parse(raw[key])
            except ValueError as exc:
                raise ConfigError(f"bad value for {key}: {exc}") from exc
        elif default is REQUIRED:
            raise ConfigError(f"missing required config key: {key}")
        else:
            resolved[key] = default
    return resolved


def format_resolved(resolved):
    lines = []
    for key in sorted(resolved):
        value = resolved[key]
        if isinstance(value, (list, tuple)):
            value = ",".join(str(v) for v in value)
        elif isinstance(value, bool):
            value = "true" if value else "false"
        elif isinstance(value, float):
            value = repr(value)
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


def write_resolved(path, resolved):
    Path(path).write_text(format_resolved(resolved), encoding="utf-8")
