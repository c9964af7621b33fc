"""Network and run configuration.

Configs are YAML documents with ``network``, ``train``, ``fusion`` and
``data`` sections. The ``toy`` and ``table1`` presets ship inside the package
(``rgbdsal/presets``); any key can be overridden with dotted ``key=value``
strings, which is what the CLI ``--set`` flag feeds in.
"""

import copy
import hashlib
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import yaml

from .errors import ConfigError

VARIANTS = {
    # name: (residuals_on, branch_losses_on, transition_on)
    "f3b": (False, False, True),
    "f3c_no_branch": (True, False, True),
    "f3c": (True, True, True),
    "f3c_no_transition": (True, True, False),
}

INIT_MODES = ("RD-A", "RD-B", "RD-C")


@dataclass(frozen=True)
class BlockSpec:
    channels: int
    convs: int = 2
    kernel: int = 3


@dataclass(frozen=True)
class NetworkConfig:
    level_count: int
    blocks: tuple
    global_channels: int
    global_kernel: int
    adaptations: dict
    transitions: dict
    inference_levels: tuple
    input_channels: int = 3
    name: str = "custom"

    @classmethod
    def from_dict(cls, d, name="custom"):
        try:
            k = int(d["level_count"])
            blocks = tuple(BlockSpec(**b) for b in d["blocks"])
            gc = d["global_context"]
            adaptations = {
                int(lvl): tuple((int(c), int(ks)) for c, ks in (layers or []))
                for lvl, layers in (d.get("adaptations") or {}).items()
            }
            transitions = {int(lvl): int(c) for lvl, c in (d.get("transitions") or {}).items()}
            inference = tuple(int(i) for i in d.get("inference_levels", range(2, k + 1)))
            cfg = cls(
                level_count=k,
                blocks=blocks,
                global_channels=int(gc["channels"]),
                global_kernel=int(gc["kernel"]),
                adaptations=adaptations,
                transitions=transitions,
                inference_levels=inference,
                input_channels=int(d.get("input_channels", 3)),
                name=name,
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"malformed network config: {exc!r}") from exc
        cfg.validate()
        return cfg

    def to_dict(self):
        return {
            "level_count": self.level_count,
            "input_channels": self.input_channels,
            "blocks": [{"channels": b.channels, "convs": b.convs, "kernel": b.kernel} for b in self.blocks],
            "global_context": {"channels": self.global_channels, "kernel": self.global_kernel},
            "adaptations": {lvl: [list(x) for x in v] for lvl, v in sorted(self.adaptations.items())},
            "transitions": dict(sorted(self.transitions.items())),
            "inference_levels": list(self.inference_levels),
        }

    def validate(self):
        k = self.level_count
        if k < 2:
            raise ConfigError(f"level_count must be >= 2, got {k}")
        if len(self.blocks) != k - 1:
            raise ConfigError(f"expected {k - 1} conv blocks for {k} levels, got {len(self.blocks)}")
        for b in self.blocks:
            if b.kernel % 2 == 0 or b.convs < 1 or b.channels < 1:
                raise ConfigError(f"invalid block spec {b}")
        if self.global_kernel % 2 == 0:
            raise ConfigError(f"global context kernel must be odd, got {self.global_kernel}")
        if 1 in self.inference_levels:
            raise ConfigError("level 1 must not take part in inference")
        if not self.inference_levels or sorted(set(self.inference_levels)) != list(self.inference_levels):
            raise ConfigError(f"inference_levels must be strictly increasing, got {self.inference_levels}")
        if self.inference_levels[-1] != k:
            raise ConfigError("the deepest level must be an inference level")
        for lvl in list(self.adaptations) + list(self.transitions) + list(self.inference_levels):
            if not 1 <= lvl <= k:
                raise ConfigError(f"level {lvl} out of range 1..{k}")
        for lvl, layers in self.adaptations.items():
            for c, ks in layers:
                if ks % 2 == 0 or c < 1:
                    raise ConfigError(f"invalid adaptation layer ({c}, {ks}) at level {lvl}")

    # -- derived quantities -------------------------------------------------

    def level_channels(self, level):
        """Channel count of the raw (pre-adaptation) features of a level."""
        if level == self.level_count:
            return self.global_channels
        return self.blocks[level - 1].channels

    def adapted_channels(self, level):
        layers = self.adaptations.get(level, ())
        return layers[-1][0] if layers else self.level_channels(level)

    def level_size(self, level, size):
        return size // 2 ** (level - 1)

    def min_size(self):
        return 2 ** (self.level_count - 1)

    def check_size(self, h, w):
        m = self.min_size()
        if h % m or w % m or h < m or w < m:
            raise ConfigError(
                f"input extents {h}x{w} must be positive multiples of {m} "
                f"(2^(K-1) for K={self.level_count}); minimum valid size is {m}x{m}"
            )

    def fusion_transition_levels(self):
        """Levels whose fused features feed the next shallower CA-Fuse block."""
        inf = self.inference_levels
        return [m for m in inf[1:] if m in self.transitions]

    def hash(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


@dataclass
class RunConfig:
    """Full resolved configuration: network plus training/data/fusion settings."""

    network: NetworkConfig
    raw: dict = field(default_factory=dict)

    def get(self, dotted, default=None):
        node = self.raw
        for part in dotted.split("."):
            if not isinstance(node, dict) or part not in node:
                return default
            node = node[part]
        return node

    def stage(self, name):
        return dict(self.raw.get("train", {}).get(name, {}))

    @property
    def variant(self):
        v = self.get("fusion.variant", "f3c")
        if v not in VARIANTS:
            raise ConfigError(f"fusion.variant must be one of {sorted(VARIANTS)}, got {v!r}")
        return v

    def snapshot(self):
        return copy.deepcopy(self.raw)


def _parse_scalar(text):
    return yaml.safe_load(text)


def apply_overrides(raw, overrides):
    raw = copy.deepcopy(raw)
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, value = item.split("=", 1)
        node = raw
        parts = key.strip().split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r} descends into a non-mapping")
        node[parts[-1]] = _parse_scalar(value)
    return raw


def preset_names():
    return sorted(p.name[:-5] for p in resources.files("rgbdsal.presets").iterdir() if p.name.endswith(".yaml"))


def load_raw(source):
    """Load a config mapping from a preset name or a YAML file path."""
    if isinstance(source, dict):
        return copy.deepcopy(source)
    text = None
    path = Path(str(source))
    if path.suffix in (".yaml", ".yml") or path.exists():
        try:
            text = path.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
    else:
        res = resources.files("rgbdsal.presets") / f"{source}.yaml"
        if not res.is_file():
            raise ConfigError(f"unknown preset {source!r}; available: {', '.join(preset_names())}")
        text = res.read_text()
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"config is not valid YAML: {exc}") from exc
    if not isinstance(raw, dict) or "network" not in raw:
        raise ConfigError("config must be a mapping with a 'network' section")
    return raw


def load_config(source="toy", overrides=()):
    raw = apply_overrides(load_raw(source), overrides)
    name = raw.get("name", str(source))
    net = NetworkConfig.from_dict(raw["network"], name=name)
    cfg = RunConfig(network=net, raw=raw)
    cfg.variant  # validate eagerly
    return cfg
