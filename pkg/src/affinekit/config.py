"""Key-value text format shared by architecture and run files.

One ``key = value`` per line, ``#`` starts a comment. Values are parsed as
int, float, bool (true/false), a bracketed comma list, or left as strings.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from pathlib import Path


class ConfigError(ValueError):
    def __init__(self, message: str, lineno: int | None = None, source: str = "<text>"):
        self.lineno = lineno
        where = f"{source}:{lineno}: " if lineno is not None else f"{source}: "
        super().__init__(where + message)


def parse_value(text: str):
    text = text.strip()
    if text.startswith("[") and text.endswith("]"):
        inner = text[1:-1].strip()
        return [parse_value(t) for t in inner.split(",")] if inner else []
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    for conv in (int, float):
        try:
            return conv(text)
        except ValueError:
            pass
    if len(text) >= 2 and text[0] == text[-1] and text[0] in "\"'":
        return text[1:-1]
    return text


def format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, str) and (not value or value != value.strip()):
        return f'"{value}"'
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(format_value(v) for v in value) + "]"
    return str(value)


def parse_kv_text(text: str, source: str = "<text>") -> dict:
    out: dict = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {raw.strip()!r}", lineno, source)
        key, value = (part.strip() for part in line.split("=", 1))
        if not key or not all(c.isalnum() or c in "_.-" for c in key):
            raise ConfigError(f"invalid key {key!r}", lineno, source)
        if key in out:
            raise ConfigError(f"duplicate key {key!r}", lineno, source)
        if not value:
            raise ConfigError(f"missing value for {key!r}", lineno, source)
        out[key] = parse_value(value)
    return out


def dump_kv_text(values: dict) -> str:
    return "".join(f"{k} = {format_value(v)}\n" for k, v in values.items())


@dataclass(frozen=True)
class ArchConfig:
    """Backbone architecture description."""

    kind: str = "dit"
    hidden: int = 128
    depth: int = 6
    heads: int = 4
    patch: int = 4
    channels: int = 3
    height: int = 32
    width: int = 32
    classes: int = 1
    mlp_ratio: int = 4
    tokens: int | None = None

    def __post_init__(self):
        if self.kind not in ("dit", "cnn"):
            raise ConfigError(f"unknown backbone kind {self.kind!r}")
        if self.kind == "dit":
            if self.height % self.patch or self.width % self.patch:
                raise ConfigError(f"image {self.height}x{self.width} not divisible by patch {self.patch}")
            if self.hidden % self.heads:
                raise ConfigError(f"hidden {self.hidden} not divisible by heads {self.heads}")
            expected = self.n_tokens
            if self.tokens is not None and self.tokens != expected:
                raise ConfigError(f"tokens = {self.tokens} but grid gives {expected}")

    @property
    def n_tokens(self) -> int:
        return (self.height // self.patch) * (self.width // self.patch)

    @property
    def patch_dim(self) -> int:
        return self.channels * self.patch * self.patch

    @classmethod
    def from_dict(cls, values: dict, source: str = "<arch>") -> "ArchConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ConfigError(f"unknown arch keys {sorted(unknown)}", source=source)
        return cls(**values)

    @classmethod
    def parse(cls, text: str, source: str = "<arch>") -> "ArchConfig":
        return cls.from_dict(parse_kv_text(text, source), source)

    @classmethod
    def load(cls, path) -> "ArchConfig":
        path = Path(path)
        return cls.parse(path.read_text(), str(path))

    def to_text(self) -> str:
        values = {k: v for k, v in asdict(self).items() if v is not None}
        return dump_kv_text(values)


# Toy DiT defaults: DiT-XL proportions scaled down roughly 9x.
TOY_DIT = ArchConfig()
# DiT-XL/2 on 32x32x4 latents, used only for parameter counting.
DIT_XL = ArchConfig(kind="dit", hidden=1152, depth=28, heads=16, patch=2, channels=4, height=32, width=32,
                    classes=1000)
# A 2D point is a 1x2 single-channel image: two scalar tokens. The width keeps a
# rank-1 adapter under 2% of the backbone (per-channel a, b alone cost ~2/hidden).
POINTS_2D = ArchConfig(kind="dit", hidden=192, depth=2, heads=4, patch=1, channels=1, height=1, width=2,
                       classes=8)


def default_rank(hidden: int) -> int:
    """Low-rank width mirroring 64 for hidden size 1152."""
    return max(1, round(hidden / 18))
