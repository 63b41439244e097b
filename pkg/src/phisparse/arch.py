"""Accelerator configuration and its INI config file.

Defaults follow the reference setup: m=256, k=16, n=32 tiles, 128 patterns,
4 KB pack / 16 KB weight / 64 KB PWP / 28 KB pattern-ID / 128 KB psum
buffers, 8-channel adder trees, 64 GB/s DRAM at 500 MHz (128 B/cycle).

The energy table is a placeholder, not a measured characterization. Only
ratios and identities built on it are meaningful.
"""

from __future__ import annotations

import configparser
from dataclasses import asdict, dataclass, field, fields, replace
from importlib import resources
from pathlib import Path

KB = 1024

ENERGY_KEYS = (
    "adder_op",         # one scalar addition in an adder tree lane
    "matcher_compare",  # one row-vs-pattern popcount compare
    "buffer_read",      # per on-chip buffer byte read
    "buffer_write",     # per on-chip buffer byte written
    "dram",             # per off-chip byte moved
    "neuron_update",    # one LIF membrane update
)


def default_energy() -> dict[str, float]:
    # placeholder pJ figures, order-of-magnitude only
    return {
        "adder_op": 0.1,
        "matcher_compare": 0.05,
        "buffer_read": 0.25,
        "buffer_write": 0.3,
        "dram": 80.0,
        "neuron_update": 0.2,
    }


@dataclass(frozen=True)
class ArchConfig:
    m: int = 256
    n: int = 32
    k: int = 16
    q: int = 128

    pack_buffer: int = 4 * KB
    weight_buffer: int = 16 * KB
    pwp_buffer: int = 64 * KB
    index_buffer: int = 28 * KB
    psum_buffer: int = 128 * KB

    adder_channels: int = 8
    l1_scan_width: int = 16
    matcher_arrays: int = 16
    l2_pipeline_depth: int = 7
    baseline_channels: int = 16

    weight_bytes: int = 4
    psum_bytes: int = 4
    id_bytes: int = 1
    pack_bytes: int = 16

    dram_bytes_per_cycle: float = 128.0
    frequency_mhz: float = 500.0
    prefetch: bool = True

    energy: dict = field(default_factory=default_energy)

    def __post_init__(self):
        for name in ("m", "n", "k", "q", "adder_channels", "matcher_arrays",
                     "baseline_channels", "weight_bytes", "psum_bytes", "id_bytes", "pack_bytes"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        for name in ("pack_buffer", "weight_buffer", "pwp_buffer", "index_buffer", "psum_buffer"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} capacity must be > 0")
        if self.dram_bytes_per_cycle <= 0:
            raise ValueError("DRAM bandwidth must be > 0")
        if self.frequency_mhz <= 0:
            raise ValueError("frequency must be > 0")
        if self.l1_scan_width < 1 or self.l2_pipeline_depth < 0:
            raise ValueError("invalid pipeline parameters")
        unknown = set(self.energy) - set(ENERGY_KEYS)
        missing = set(ENERGY_KEYS) - set(self.energy)
        if unknown or missing:
            raise ValueError(f"energy table keys: unknown {sorted(unknown)}, missing {sorted(missing)}")

    def scaled_buffers(self, factor: float) -> "ArchConfig":
        return replace(
            self,
            pack_buffer=max(1, int(self.pack_buffer * factor)),
            weight_buffer=max(1, int(self.weight_buffer * factor)),
            pwp_buffer=max(1, int(self.pwp_buffer * factor)),
            index_buffer=max(1, int(self.index_buffer * factor)),
            psum_buffer=max(1, int(self.psum_buffer * factor)),
        )

    def with_energy(self, **entries) -> "ArchConfig":
        table = dict(self.energy)
        table.update(entries)
        return replace(self, energy=table)

    def to_dict(self) -> dict:
        return asdict(self)


_SECTIONS = {
    "tile": ("m", "n", "k", "q"),
    "buffers": ("pack_buffer", "weight_buffer", "pwp_buffer", "index_buffer", "psum_buffer"),
    "compute": ("adder_channels", "l1_scan_width", "matcher_arrays", "l2_pipeline_depth",
                "baseline_channels", "prefetch"),
    "encoding": ("weight_bytes", "psum_bytes", "id_bytes", "pack_bytes"),
    "dram": ("dram_bytes_per_cycle", "frequency_mhz"),
}


class ConfigError(ValueError):
    pass


def _convert(name: str, raw: str):
    kind = {f.name: f.type for f in fields(ArchConfig)}[name]
    try:
        if kind in ("bool", bool):
            low = raw.strip().lower()
            if low not in ("true", "false", "yes", "no", "1", "0"):
                raise ValueError(raw)
            return low in ("true", "yes", "1")
        if kind in ("float", float):
            return float(raw)
        value = raw.strip().upper()
        if value.endswith("KB"):
            return int(float(value[:-2]) * KB)
        return int(value)
    except ValueError:
        raise ConfigError(f"bad value for {name}: {raw!r}") from None


def parse_config(text: str) -> ArchConfig:
    """Build an ArchConfig from INI text; unknown sections or keys are errors."""
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc
    kwargs = {}
    energy = default_energy()
    for section in cp.sections():
        if section == "energy":
            for key, raw in cp.items(section):
                if key not in ENERGY_KEYS:
                    raise ConfigError(f"unknown energy key {key!r}")
                try:
                    energy[key] = float(raw)
                except ValueError:
                    raise ConfigError(f"bad value for energy.{key}: {raw!r}") from None
            continue
        if section not in _SECTIONS:
            raise ConfigError(f"unknown section [{section}]")
        for key, raw in cp.items(section):
            if key not in _SECTIONS[section]:
                raise ConfigError(f"unknown key {key!r} in [{section}]")
            kwargs[key] = _convert(key, raw)
    try:
        return ArchConfig(**kwargs, energy=energy)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path) -> ArchConfig:
    return parse_config(Path(path).read_text())


def dump_config(cfg: ArchConfig) -> str:
    lines = []
    for section, keys in _SECTIONS.items():
        lines.append(f"[{section}]")
        for key in keys:
            value = getattr(cfg, key)
            lines.append(f"{key} = {str(value).lower() if isinstance(value, bool) else value}")
        lines.append("")
    lines.append("[energy]")
    lines += [f"{key} = {cfg.energy[key]}" for key in ENERGY_KEYS]
    return "\n".join(lines) + "\n"


def default_config_text() -> str:
    return resources.files("phisparse").joinpath("default_arch.ini").read_text()
