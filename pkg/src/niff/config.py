"""Run configuration: a flat ``section.key = value`` file.

Blank lines and ``#`` comments are ignored.  Every key has a default, listed
in :data:`DEFAULTS` with a one-line description; unknown keys are errors so a
typo cannot silently fall back to a default.
"""
from __future__ import annotations

from dataclasses import dataclass

from .model import DESK_PRESETS, ModelSpec
from .train import TrainConfig


class ConfigError(ValueError):
    pass


# key -> (default, description)
DEFAULTS = {
    "model.desk": ("plain", "backbone: plain (depthwise-separable stages) or resnet (2 residual blocks/stage)"),
    "model.variant": ("niff", "niff (frequency-domain convs) or spatial (same topology, spatial convs)"),
    "model.channels": ((16, 32, 64), "channels of the three stages"),
    "model.preset": ("cifar_small", "filter MLP preset: cifar_small, imagenet_light, imagenet_large"),
    "model.activation": ("relu", "filter MLP activation: relu, silu, gelu"),
    "model.full": ("decomposed", "resnet convs: decomposed (depthwise NIFF + 1x1 mix) or full NIFF"),
    "model.blocks_per_stage": (2, "residual blocks per stage (resnet only)"),
    "model.grid_norm": ("normalized", "filter coordinates: normalized (about [-1, 1]) or index"),
    "model.spectral_path": ("complex", "complex (full fft2/ifft2, residue every call) or half (rfft2 fast path)"),
    "train.lr": (0.02, "initial learning rate, cosine-annealed per epoch"),
    "train.momentum": (0.9, "SGD momentum"),
    "train.weight_decay": (0.002, "L2 weight decay added to gradients"),
    "train.label_smoothing": (0.1, "label smoothing of the cross-entropy target"),
    "train.batch_size": (16, "minibatch size"),
    "train.epochs": (10, "number of epochs"),
    "train.seed": (0, "seed for init, shuffling and augmentation streams"),
    "train.pad": (0, "zero-pad-and-crop augmentation margin (4 for CIFAR)"),
    "train.flip_prob": (0.0, "horizontal flip probability (0.5 for CIFAR)"),
    "train.log_timing": (True, "write wall-clock epoch_seconds; false writes 0.0 for byte-identical logs"),
    "data.dataset": ("mnist_idx", "mnist_idx or cifar10_binary"),
    "data.root": ("data/mnist5k", "directory holding the dataset files"),
    "data.limit_train": (0, "use only the first n training samples (0 = all)"),
    "data.limit_test": (0, "use only the first n test samples (0 = all)"),
    "analysis.threshold": (0.95, "mass-ratio threshold for the effective kernel size"),
    "analysis.absolute": (True, "mass ratios over |k| (false: raw signed sums)"),
    "analysis.figures": (True, "render matplotlib PNGs next to the CSV/PGM outputs"),
    "bench.threads": (1, "worker threads for FFT and BLAS during timing"),
    "bench.iterations": (20, "timed repetitions per microbenchmark case"),
    "bench.warmup": (5, "untimed warmup repetitions per case"),
    "bench.epochs": (3, "timed epochs per model in the epoch suite"),
    "bench.batch_size": (16, "minibatch size in the epoch suite"),
    "bench.limit": (1000, "training samples per timed epoch (0 = all)"),
    "bench.quick": (False, "shorter size sweeps"),
}

SECTIONS = ("model", "train", "data", "analysis", "bench")
_TRUE = {"true", "yes", "on", "1"}
_FALSE = {"false", "no", "off", "0"}


def _parse_value(key, raw, default):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError("expected true or false")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            vals = tuple(int(v) for v in raw.replace(" ", "").split(",") if v)
            if len(vals) != len(default):
                raise ValueError(f"expected {len(default)} comma-separated integers")
            return vals
    except ValueError as e:
        raise ConfigError(f"{key} = {raw!r}: {e}") from None
    return raw


def _format_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(map(str, v))
    return str(v)


@dataclass
class RunConfig:
    values: dict

    @classmethod
    def defaults(cls):
        return cls({k: d for k, (d, _) in DEFAULTS.items()})

    @classmethod
    def from_text(cls, text, source="<config>"):
        cfg = cls.defaults()
        for n, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{source}:{n}: expected 'section.key = value', got {line!r}")
            key, raw = (s.strip() for s in line.split("=", 1))
            cfg.set(key, raw, where=f"{source}:{n}: ")
        return cfg

    @classmethod
    def from_file(cls, path):
        try:
            with open(path) as f:
                text = f.read()
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        return cls.from_text(text, str(path))

    @classmethod
    def from_dict(cls, flat):
        cfg = cls.defaults()
        for k, v in flat.items():
            cfg.set(k, _format_value(tuple(v) if isinstance(v, list) else v))
        return cfg

    def set(self, key, raw, where=""):
        if key not in DEFAULTS:
            section = key.split(".", 1)[0]
            hint = "" if section in SECTIONS else f" (sections: {', '.join(SECTIONS)})"
            raise ConfigError(f"{where}unknown key {key!r}{hint}")
        self.values[key] = _parse_value(key, str(raw), DEFAULTS[key][0])

    def __getitem__(self, key):
        return self.values[key]

    def section(self, name):
        return {k.split(".", 1)[1]: v for k, v in self.values.items() if k.startswith(name + ".")}

    def to_dict(self):
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.values.items()}

    def to_text(self):
        return "".join(f"{k} = {_format_value(v)}\n" for k, v in self.values.items())

    def train_config(self) -> TrainConfig:
        return TrainConfig(**self.section("train"))

    def model_spec(self, in_channels=1, input_size=(28, 28), num_classes=10) -> ModelSpec:
        m = self.section("model")
        if m["desk"] not in DESK_PRESETS:
            raise ConfigError(f"model.desk must be one of {sorted(DESK_PRESETS)}, got {m['desk']!r}")
        if m["variant"] not in ("niff", "spatial"):
            raise ConfigError(f"model.variant must be niff or spatial, got {m['variant']!r}")
        kw = dict(channels=m["channels"], preset=m["preset"], activation=m["activation"],
                  in_channels=in_channels, input_size=tuple(input_size), num_classes=num_classes)
        if m["desk"] == "resnet":
            if m["full"] not in ("decomposed", "full"):
                raise ConfigError(f"model.full must be decomposed or full, got {m['full']!r}")
            kw.update(full=m["full"], blocks_per_stage=m["blocks_per_stage"])
        spec = DESK_PRESETS[m["desk"]](m["variant"], **kw)
        spec.grid_norm = m["grid_norm"]
        spec.spectral_path = m["spectral_path"]
        return spec.validate()


def describe_defaults() -> str:
    """The default config file, each key preceded by its description."""
    out = []
    for section in SECTIONS:
        out.append(f"# --- {section}")
        for k, (d, doc) in DEFAULTS.items():
            if k.startswith(section + "."):
                out.append(f"# {doc}")
                out.append(f"{k} = {_format_value(d)}")
        out.append("")
    return "\n".join(out)
