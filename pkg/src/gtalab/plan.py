"""Block-plan mini-language.

A plan is a comma-separated list of block kinds, each optionally followed by
bracketed ``key=value`` options::

    sa,gta[g=8,k=4,ccmh=on]
    dnl[norm=on],tape[pe=sinusoidal]

Kinds and their options:

    nl, sa, ta, dnl   norm=on|off
    tape              norm=on|off  pe=learned|sinusoidal  tmax=<int>
    gta               g=<int>  k=<int>  heads=<int>  ccmh=on|off
                      pixel=on|off  region=on|off

Absent options take their defaults (``tmax`` = clip length, GTA ``g=8``,
``k=C/8``, ``heads=g``, every switch on except ``norm``).
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .errors import ConfigError

KINDS = ("nl", "sa", "ta", "tape", "dnl", "gta")
TEMPORALLY_BLIND = ("nl", "sa", "ta", "dnl")

_OPTIONS = {
    "nl": {"norm"},
    "sa": {"norm"},
    "ta": {"norm"},
    "dnl": {"norm"},
    "tape": {"norm", "pe", "tmax"},
    "gta": {"g", "k", "heads", "ccmh", "pixel", "region"},
}
_SWITCHES = {"norm", "ccmh", "pixel", "region"}
_INTS = {"tmax", "g", "k", "heads"}


def parse_switch(value: str, what: str = "switch") -> bool:
    v = value.strip().lower()
    if v in ("on", "true", "1", "yes"):
        return True
    if v in ("off", "false", "0", "no"):
        return False
    raise ConfigError(f"{what} must be on/off, got {value!r}")


@dataclass(frozen=True)
class BlockSpec:
    kind: str
    options: tuple[tuple[str, str], ...] = field(default=())

    def opt(self, key: str, default=None):
        for k, v in self.options:
            if k == key:
                return v
        return default

    def switch(self, key: str, default: bool) -> bool:
        v = self.opt(key)
        return default if v is None else parse_switch(v, f"{self.kind}.{key}")

    def integer(self, key: str, default: int) -> int:
        v = self.opt(key)
        return default if v is None else int(v)

    def to_text(self) -> str:
        if not self.options:
            return self.kind
        return f"{self.kind}[{','.join(f'{k}={v}' for k, v in self.options)}]"


def _split_top(text: str) -> list[str]:
    parts, depth, cur = [], 0, []
    for ch in text:
        if ch == "[":
            depth += 1
        elif ch == "]":
            depth -= 1
            if depth < 0:
                raise ConfigError(f"unbalanced ']' in block plan {text!r}")
        if ch == "," and depth == 0:
            parts.append("".join(cur))
            cur = []
        else:
            cur.append(ch)
    if depth:
        raise ConfigError(f"unbalanced '[' in block plan {text!r}")
    parts.append("".join(cur))
    return [p.strip() for p in parts]


def parse_block(text: str) -> BlockSpec:
    text = text.strip()
    if "[" in text:
        if not text.endswith("]"):
            raise ConfigError(f"malformed block {text!r}")
        kind, body = text[:-1].split("[", 1)
    else:
        kind, body = text, ""
    kind = kind.strip().lower()
    if kind not in KINDS:
        raise ConfigError(f"unknown block kind {kind!r}; expected one of {', '.join(KINDS)}")
    opts = []
    seen = set()
    for item in filter(None, (s.strip() for s in body.split(","))):
        if "=" not in item:
            raise ConfigError(f"option {item!r} in {text!r} must be key=value")
        key, value = (s.strip() for s in item.split("=", 1))
        key = key.lower()
        if key not in _OPTIONS[kind]:
            raise ConfigError(f"block {kind!r} has no option {key!r}")
        if key in seen:
            raise ConfigError(f"option {key!r} repeated in {text!r}")
        seen.add(key)
        if key in _SWITCHES:
            value = "on" if parse_switch(value, f"{kind}.{key}") else "off"
        elif key in _INTS:
            try:
                if int(value) < 1:
                    raise ValueError
            except ValueError:
                raise ConfigError(f"{kind}.{key} must be a positive integer, got {value!r}") from None
            value = str(int(value))
        elif key == "pe" and value not in ("learned", "sinusoidal"):
            raise ConfigError(f"tape.pe must be learned or sinusoidal, got {value!r}")
        opts.append((key, value))
    return BlockSpec(kind, tuple(opts))


def parse_plan(text: str) -> tuple[BlockSpec, ...]:
    text = (text or "").strip()
    if not text or text.lower() == "none":
        return ()
    return tuple(parse_block(p) for p in _split_top(text))


def plan_to_text(blocks) -> str:
    return ",".join(b.to_text() for b in blocks) or "none"
