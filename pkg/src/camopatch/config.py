"""Run configuration: TOML on disk, dataclasses in memory.

One table per module's knobs. Parsing uses tomllib/tomli; serialization is a
small emitter covering this schema (tables of scalars and flat lists), so
parse -> serialize -> parse is the identity.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, field, replace
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from camopatch.detector.corpus import CorpusConfig
from camopatch.detector.toy import ToyTrainConfig
from camopatch.imaging import TransformConfig
from camopatch.optimizer import TrainerConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DetectorSelection:
    kind: str  # "toy" | "external"
    command: str = ""  # worker command line for kind == "external"
    params_path: str = "toy_detector.npz"  # trained-weights cache for the toy
    corpus_seed: int = 0
    train_seed: int = 0

    @staticmethod
    def parse(spec: str) -> "DetectorSelection":
        if spec == "toy":
            return DetectorSelection(kind="toy")
        if spec.startswith("external:"):
            cmd = spec.split(":", 1)[1]
            if not cmd.strip():
                raise ConfigError("external detector needs a command line")
            return DetectorSelection(kind="external", command=cmd)
        raise ConfigError(f"detector must be 'toy' or 'external:<cmd>', got {spec!r}")

    def spec(self) -> str:
        return self.kind if self.kind == "toy" else f"external:{self.command}"


@dataclass(frozen=True)
class RunConfig:
    seed: int
    out_dir: str
    detector: DetectorSelection
    images: tuple[str, ...]
    boxes_path: str = ""
    truths_path: str = ""
    trainer: TrainerConfig = field(default_factory=TrainerConfig)

    def validate_paths(self, base: Path) -> None:
        """Referenced input paths must exist; collects every violation."""
        missing = []
        for p in self.images:
            if not (base / p).exists():
                missing.append(f"image {p}")
        for name, p in (("boxes", self.boxes_path), ("truths", self.truths_path)):
            if p and not (base / p).exists():
                missing.append(f"{name} file {p}")
        if missing:
            raise ConfigError("missing input paths: " + "; ".join(missing))


_TRAINER_KEYS = (
    "steps",
    "iterations_per_step",
    "n",
    "dlr0",
    "dlr_decay",
    "dlr_decay_frequency",
    "deception_momentum",
    "plr_max0",
    "plr_floor_fraction",
    "plr_momentum",
    "plr_max_decay",
    "plr_max_decay_frequency",
    "plr_max_decay_enabled",
    "patch_ratio",
    "init_mode",
    "hybrid_noise",
    "target_confidence",
)


def _require(table: dict, key: str, section: str):
    if key not in table:
        raise ConfigError(f"missing required key {key!r} in [{section}]")
    return table[key]


def parse_run_config(text: str) -> RunConfig:
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML: {exc}")

    run = data.get("run", {})
    seed = _require(run, "seed", "run")
    out_dir = _require(run, "out_dir", "run")
    det = DetectorSelection.parse(run.get("detector", "toy"))
    toy = data.get("toy", {})
    det = replace(
        det,
        params_path=toy.get("params_path", det.params_path),
        corpus_seed=int(toy.get("corpus_seed", det.corpus_seed)),
        train_seed=int(toy.get("train_seed", det.train_seed)),
    )

    datasec = data.get("data", {})
    images = tuple(datasec.get("images", ()))
    if not images:
        raise ConfigError("at least one image path required in [data] images")

    trainer_table = dict(data.get("trainer", {}))
    unknown = set(trainer_table) - set(_TRAINER_KEYS)
    if unknown:
        raise ConfigError(f"unknown [trainer] keys: {sorted(unknown)}")
    trainer_table.setdefault("seed", int(seed))

    tsec = data.get("transforms", {})
    transform = TransformConfig(
        rotations=tuple(int(r) for r in tsec.get("rotations", (0, 90, 270))),
        brightness_range=tuple(tsec.get("brightness", (0.4, 1.6))),
        occupancy_range=tuple(tsec.get("occupancy", (0.2, 0.3))),
        enabled=bool(tsec.get("enabled", True)),
    )

    try:
        trainer = TrainerConfig(transform=transform, **trainer_table)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid [trainer] section: {exc}")

    return RunConfig(
        seed=int(seed),
        out_dir=str(out_dir),
        detector=det,
        images=images,
        boxes_path=datasec.get("boxes", ""),
        truths_path=datasec.get("truths", ""),
        trainer=trainer,
    )


def load_run_config(path: str | Path) -> RunConfig:
    return parse_run_config(Path(path).read_text())


def _toml_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, float)):
        return repr(value)
    if isinstance(value, str):
        escaped = value.replace("\\", "\\\\").replace('"', '\\"')
        return f'"{escaped}"'
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(_toml_value(v) for v in value) + "]"
    raise ConfigError(f"cannot serialize {type(value).__name__} to TOML")


def dump_tables(tables: dict[str, dict]) -> str:
    lines = []
    for name, table in tables.items():
        lines.append(f"[{name}]")
        for key, value in table.items():
            lines.append(f"{key} = {_toml_value(value)}")
        lines.append("")
    return "\n".join(lines)


def serialize_run_config(config: RunConfig) -> str:
    t = config.trainer
    tables: dict[str, dict] = {
        "run": {
            "seed": config.seed,
            "out_dir": config.out_dir,
            "detector": config.detector.spec(),
        },
        "data": {"images": list(config.images)},
        "trainer": {k: getattr(t, k) for k in _TRAINER_KEYS},
        "transforms": {
            "enabled": t.transform.enabled,
            "rotations": list(t.transform.rotations),
            "brightness": list(t.transform.brightness_range),
            "occupancy": list(t.transform.occupancy_range),
        },
    }
    if config.boxes_path:
        tables["data"]["boxes"] = config.boxes_path
    if config.truths_path:
        tables["data"]["truths"] = config.truths_path
    if config.detector.kind == "toy":
        tables["toy"] = {
            "params_path": config.detector.params_path,
            "corpus_seed": config.detector.corpus_seed,
            "train_seed": config.detector.train_seed,
        }
    return dump_tables(tables)


@dataclass
class GridVariant:
    label: str
    field: str
    value: object


@dataclass
class GridStudy:
    name: str
    variants: list[GridVariant]
    carry_forward: bool = False


@dataclass
class AblationGrid:
    base_config: str
    studies: list[GridStudy]


_FIELD_PREFIXES = {"trainer.": "", "transforms.": "transform."}


def grid_field_to_trainer_field(dotted: str) -> str:
    for prefix, mapped in _FIELD_PREFIXES.items():
        if dotted.startswith(prefix):
            return mapped + dotted[len(prefix):]
    raise ConfigError(
        f"grid field must start with 'trainer.' or 'transforms.', got {dotted!r}"
    )


def parse_grid(text: str) -> AblationGrid:
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML: {exc}")
    base = data.get("base_config", "")
    if not base:
        raise ConfigError("grid needs a top-level base_config path")
    studies = []
    for s in data.get("study", []):
        name = _require(s, "name", "study")
        variants = []
        for v in s.get("variant", []):
            label = _require(v, "label", "study.variant")
            fieldname = _require(v, "field", "study.variant")
            grid_field_to_trainer_field(fieldname)  # validate early
            value = _require(v, "value", "study.variant")
            if isinstance(value, list):
                value = tuple(value)
            variants.append(GridVariant(label=label, field=fieldname, value=value))
        if not variants:
            raise ConfigError(f"study {name!r} has no variants")
        studies.append(
            GridStudy(
                name=name,
                variants=variants,
                carry_forward=bool(s.get("carry_forward", False)),
            )
        )
    if not studies:
        raise ConfigError("grid has no studies")
    return AblationGrid(base_config=base, studies=studies)


def load_grid(path: str | Path) -> AblationGrid:
    return parse_grid(Path(path).read_text())
