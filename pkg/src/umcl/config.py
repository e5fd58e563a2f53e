"""Flat ``key=value`` run configuration with strict key checking.

Accepted keys are the TrainConfig fields, ``synth.<SynthConfig field>`` for
a generated corpus, and ``data.image_text`` / ``data.image_label`` /
``data.eval`` for JSONL files. Unknown keys are errors.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .data import SynthConfig
from .training import TrainConfig

DATA_KEYS = ("image_text", "image_label", "eval", "templates", "class_names")


class ConfigError(ValueError):
    pass


def _convert(key, raw: str, kind):
    raw = raw.strip()
    try:
        if kind is bool:
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind.__name__}") from None


def _types(cls):
    return {f.name: type(f.default) for f in fields(cls)}


@dataclass(frozen=True)
class RunConfig:
    train: TrainConfig = TrainConfig()
    synth: SynthConfig | None = None
    data: dict = field(default_factory=dict)

    def with_values(self, values: dict) -> "RunConfig":
        """Apply ``key -> string`` overrides, validating every key."""
        tvals, svals, dvals = {}, {}, dict(self.data)
        ttypes, stypes = _types(TrainConfig), _types(SynthConfig)
        for key, raw in values.items():
            if key.startswith("synth."):
                name = key[len("synth."):]
                if name not in stypes:
                    raise ConfigError(f"unknown config key {key!r}")
                svals[name] = _convert(key, str(raw), stypes[name])
            elif key.startswith("data."):
                name = key[len("data."):]
                if name not in DATA_KEYS:
                    raise ConfigError(f"unknown config key {key!r}")
                dvals[name] = str(raw).strip()
            elif key in ttypes:
                tvals[key] = _convert(key, str(raw), ttypes[key])
            else:
                raise ConfigError(f"unknown config key {key!r}")
        try:
            train = replace(self.train, **tvals)
            synth = self.synth
            if svals or synth is not None:
                synth = replace(synth or SynthConfig(), **svals)
                synth.validate()
        except ValueError as e:
            raise ConfigError(str(e)) from None
        return RunConfig(train, synth, dvals)

    def to_lines(self) -> list[str]:
        lines = [f"{k}={_fmt(v)}" for k, v in self.train.to_dict().items()]
        if self.synth is not None:
            lines += [f"synth.{f.name}={_fmt(getattr(self.synth, f.name))}"
                      for f in fields(SynthConfig)]
        lines += [f"data.{k}={v}" for k, v in sorted(self.data.items())]
        return lines

    def dump(self, path) -> None:
        Path(path).write_text("\n".join(self.to_lines()) + "\n")


def _fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def parse_pairs(text: str, origin: str = "<config>") -> dict:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in values:
            raise ConfigError(f"{origin}:{lineno}: duplicate key {key!r}")
        values[key] = value
    return values


def load_config(path, base: RunConfig | None = None) -> RunConfig:
    text = Path(path).read_text()
    return (base or RunConfig()).with_values(parse_pairs(text, str(path)))
