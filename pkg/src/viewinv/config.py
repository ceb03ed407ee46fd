"""Run configuration: flat ``key = value`` lines under bracketed sections.

Four sections are recognized: ``[data]``, ``[encoder]``, ``[train]`` and
``[eval]``. Every value is type-checked at load time and errors carry the
source line; unknown sections or keys are rejected. Command-line overrides
use ``--section.key=value`` and go through the same typed schema.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .dataset import DataConfig
from .encoder import EncoderConfig
from .evaluation import EvalConfig
from .trainer import TrainConfig


class ConfigError(Exception):
    """User configuration problem (CLI exit code 2)."""


# ---------------------------------------------------------------------------
# value parsers


def _int(s: str) -> int:
    return int(s)


def _float(s: str) -> float:
    return float(s)


def _bool(s: str) -> bool:
    low = s.strip().lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"expected a boolean, got {s!r}")


def _str(s: str) -> str:
    return s


def _opt_float(s: str):
    return None if s.strip() == "" else float(s)


def _ints(s: str) -> tuple[int, ...]:
    return tuple(int(part) for part in s.split(","))


def _floats(s: str) -> tuple[float, ...]:
    return tuple(float(part) for part in s.split(","))


def _triples(s: str) -> tuple[tuple[int, int, int], ...]:
    out = []
    for part in s.split(","):
        dims = part.strip().split("x")
        if len(dims) != 3:
            raise ValueError(f"expected TxHxW triples, got {part!r}")
        out.append(tuple(int(d) for d in dims))
    return tuple(out)


_SCHEMA: dict[str, dict[str, tuple]] = {
    "data": {
        "root": (_str, "data"),
        "seed": (_int, 0),
        "num_classes": (_int, 5),
        "train_scenes_per_class": (_int, 100),
        "test_scenes_per_class": (_int, 30),
        "frames": (_int, 20),
        "height": (_int, 32),
        "width": (_int, 32),
    },
    "encoder": {
        "num_blocks": (_int, 5),
        "split_index": (_int, 3),
        "channels_per_block": (_ints, (8, 16, 32, 48, 64)),
        "embedding_dim": (_int, 128),
        "clip_frames": (_int, 16),
        "pools": (_triples, ((2, 2, 2), (2, 2, 2), (1, 1, 1), (2, 2, 2), (1, 1, 1))),
        "kernels": (_triples, ((1, 3, 3), (3, 3, 3), (3, 3, 3), (3, 3, 3), (3, 3, 3))),
        "world_depth": (_int, 8),
        "d_low": (_int, 128),
    },
    "train": {
        "tau": (_float, 0.07),
        "momentum": (_float, 0.999),
        "queue_capacity": (_int, 2048),
        "alpha": (_float, 1.0),
        "learning_rate": (_float, 1e-3),
        "weight_decay": (_float, 1e-5),
        "stage1_epochs": (_int, 30),
        "stage2_epochs": (_int, 20),
        "batch_size": (_int, 32),
        "loss_weights": (_floats, (1.0, 1.0, 1.0, 1.0)),
        "mix_mode": (_str, "same_instance"),
        "grl_scale": (_float, 1.0),
        "seed": (_int, 0),
        "fixed_lambda": (_opt_float, None),
        "generator_enabled": (_bool, True),
        "queue_prefill": (_bool, True),
        "checkpoint_every": (_int, 1),
        "single_threaded": (_bool, False),
        "run_root": (_str, "runs"),
        "run_name": (_str, ""),
        "ablate_seeds": (_ints, (0, 1, 2)),
    },
    "eval": {
        "probe_epochs": (_int, 30),
        "finetune_epochs": (_int, 30),
        "batch_size": (_int, 64),
        "learning_rate": (_float, 1e-3),
        "weight_decay": (_float, 1e-5),
        "seed": (_int, 0),
        "multicrop": (_bool, False),
        "crop_size": (_int, 28),
        "checkpoint": (_str, ""),
        "split": (_str, "cvs3"),
        "out": (_str, ""),
    },
}


@dataclass
class RunConfig:
    """Typed view over the four config sections."""

    values: dict[str, dict[str, object]] = field(default_factory=dict)

    def __getitem__(self, section: str) -> dict[str, object]:
        return self.values[section]

    def data_config(self) -> DataConfig:
        d = self["data"]
        try:
            return DataConfig(
                root=d["root"],
                seed=d["seed"],
                num_classes=d["num_classes"],
                train_scenes_per_class=d["train_scenes_per_class"],
                test_scenes_per_class=d["test_scenes_per_class"],
                frames=d["frames"],
                height=d["height"],
                width=d["width"],
            )
        except ValueError as exc:
            raise ConfigError(f"data.num_classes: {exc}") from exc

    def encoder_config(self) -> EncoderConfig:
        e, d = self["encoder"], self["data"]
        try:
            return EncoderConfig(
                num_blocks=e["num_blocks"],
                split_index=e["split_index"],
                channels_per_block=e["channels_per_block"],
                embedding_dim=e["embedding_dim"],
                input_shape=(e["clip_frames"], d["height"], d["width"], 3),
                pools=e["pools"],
                kernels=e["kernels"],
            )
        except ValueError as exc:
            raise ConfigError(f"[encoder] {exc}") from exc

    def train_config(self) -> TrainConfig:
        t = self["train"]
        try:
            return TrainConfig(
                tau=t["tau"],
                momentum=t["momentum"],
                queue_capacity=t["queue_capacity"],
                alpha=t["alpha"],
                learning_rate=t["learning_rate"],
                weight_decay=t["weight_decay"],
                stage1_epochs=t["stage1_epochs"],
                stage2_epochs=t["stage2_epochs"],
                batch_size=t["batch_size"],
                loss_weights=tuple(t["loss_weights"]),
                mix_mode=t["mix_mode"],
                grl_scale=t["grl_scale"],
                seed=t["seed"],
                fixed_lambda=t["fixed_lambda"],
                generator_enabled=t["generator_enabled"],
                queue_prefill=t["queue_prefill"],
                checkpoint_every=t["checkpoint_every"],
                single_threaded=t["single_threaded"],
            )
        except ValueError as exc:
            raise ConfigError(f"[train] {exc}") from exc

    def eval_config(self) -> EvalConfig:
        e = self["eval"]
        return EvalConfig(
            probe_epochs=e["probe_epochs"],
            finetune_epochs=e["finetune_epochs"],
            batch_size=e["batch_size"],
            learning_rate=e["learning_rate"],
            weight_decay=e["weight_decay"],
            seed=e["seed"],
            multicrop=e["multicrop"],
            crop_size=e["crop_size"],
        )

    def generator_overrides(self) -> dict:
        e = self["encoder"]
        return {"world_depth": e["world_depth"], "code_dim": e["d_low"]}


def default_config() -> RunConfig:
    values = {sec: {k: default for k, (_, default) in keys.items()} for sec, keys in _SCHEMA.items()}
    return RunConfig(values=values)


def _assign(cfg: RunConfig, section: str, key: str, raw: str, where: str) -> None:
    if section not in _SCHEMA:
        raise ConfigError(f"{where}: unknown section [{section}]")
    if key not in _SCHEMA[section]:
        raise ConfigError(f"{where}: unknown key {section}.{key}")
    parser = _SCHEMA[section][key][0]
    try:
        cfg.values[section][key] = parser(raw)
    except ValueError as exc:
        raise ConfigError(f"{where}: invalid value for {section}.{key}: {raw!r} ({exc})") from exc


def parse_config_text(text: str, cfg: RunConfig, filename: str = "<config>") -> RunConfig:
    section = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith(("#", ";")):
            continue
        where = f"{filename}:{lineno}"
        if stripped.startswith("[") and stripped.endswith("]"):
            section = stripped[1:-1].strip()
            if section not in _SCHEMA:
                raise ConfigError(f"{where}: unknown section [{section}]")
            continue
        if "=" not in stripped:
            raise ConfigError(f"{where}: expected 'key = value', got {stripped!r}")
        if section is None:
            raise ConfigError(f"{where}: key outside of any [section]")
        key, _, raw = stripped.partition("=")
        _assign(cfg, section, key.strip(), raw.strip(), where)
    return cfg


def apply_override(cfg: RunConfig, flag: str) -> None:
    """Apply one ``--section.key=value`` command-line override."""
    body = flag[2:] if flag.startswith("--") else flag
    head, eq, raw = body.partition("=")
    if not eq or "." not in head:
        raise ConfigError(f"override {flag!r}: expected --section.key=value")
    section, _, key = head.partition(".")
    _assign(cfg, section, key, raw, f"override {flag!r}")


def load_config(path=None, overrides: list[str] | None = None) -> RunConfig:
    cfg = default_config()
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        parse_config_text(text, cfg, filename=str(path))
    for flag in overrides or []:
        apply_override(cfg, flag)
    return cfg


def _format_value(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        if value and isinstance(value[0], tuple):
            return ",".join("x".join(str(d) for d in t) for t in value)
        return ",".join(str(v) for v in value)
    return str(value)


def snapshot(cfg: RunConfig) -> str:
    """Serialize to the same format load_config reads (stable ordering)."""
    lines = []
    for section in _SCHEMA:
        lines.append(f"[{section}]")
        for key in _SCHEMA[section]:
            lines.append(f"{key} = {_format_value(cfg.values[section][key])}")
        lines.append("")
    return "\n".join(lines)
