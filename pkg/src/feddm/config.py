"""Flat key=value configuration files with [section] headers.

Sections: [diffusion], [data], [model], [federated], [partition], [grid].
Unknown sections or keys are rejected with the offending name and line
number; every value is validated before anything runs.  The [grid] section
lists values whose cross product defines an experiment sweep.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

from .data import PARTITION_MODES, PartitionSpec
from .diffusion import SIGMA_MODES, DiffusionConfig
from .errors import ConfigError
from .federation import FedConfig
from .rng import derive_seed


@dataclass(frozen=True)
class DataConfig:
    """Synthetic dataset: a Gaussian mixture on a circle in 2-d."""

    n: int = 4096
    components: int = 8
    radius: float = 1.0
    std: float = 0.1

    def __post_init__(self) -> None:
        if self.n < self.components:
            raise ConfigError(f"need n >= components, got n={self.n}, components={self.components}")
        if self.components < 1:
            raise ConfigError(f"components must be >= 1, got {self.components}")
        if self.std < 0:
            raise ConfigError(f"std must be >= 0, got {self.std}")


@dataclass(frozen=True)
class ModelConfig:
    """Denoiser architecture knobs."""

    hidden: tuple[int, ...] = (64, 64)
    activation: str = "tanh"
    time_features: int = 4

    def __post_init__(self) -> None:
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if not self.hidden or any(h < 1 for h in self.hidden):
            raise ConfigError(f"hidden widths must be positive, got {self.hidden}")
        if self.activation not in ("tanh", "relu"):
            raise ConfigError(f"activation must be tanh or relu, got {self.activation!r}")
        if self.time_features < 0:
            raise ConfigError(f"time_features must be >= 0, got {self.time_features}")


@dataclass(frozen=True)
class ExperimentGrid:
    """Value lists whose cross product defines the runs of a sweep.

    ``contribution`` lists fractions mapped to k = round(fraction * K); it is
    mutually exclusive with an explicit ``contributing`` list.
    """

    clients: tuple[int, ...] = ()
    contributing: tuple[int, ...] = ()
    contribution: tuple[float, ...] = ()
    rounds: tuple[int, ...] = ()
    local_epochs: tuple[int, ...] = ()
    variants: tuple[str, ...] = ()
    bitwidths: tuple[int, ...] = ()
    skew_levels: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        if self.contributing and self.contribution:
            raise ConfigError("grid lists both contributing and contribution; pick one")
        if any(not (0.0 < f <= 1.0) for f in self.contribution):
            raise ConfigError(f"contribution fractions must be in (0, 1], got {self.contribution}")

    @property
    def empty(self) -> bool:
        return not any(
            (
                self.clients,
                self.contributing,
                self.contribution,
                self.rounds,
                self.local_epochs,
                self.variants,
                self.bitwidths,
                self.skew_levels,
            )
        )


@dataclass(frozen=True)
class AppConfig:
    """Everything one experiment file describes."""

    federated: FedConfig
    diffusion: DiffusionConfig
    partition: PartitionSpec
    grid: ExperimentGrid
    data: DataConfig
    model: ModelConfig


def _parse_sections(path: Path) -> dict[str, dict[str, tuple[str, int]]]:
    sections: dict[str, dict[str, tuple[str, int]]] = {}
    section_lines: dict[str, int] = {}
    current: str | None = None
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#") or line.startswith(";"):
            continue
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1].strip()
            sections.setdefault(current, {})
            section_lines.setdefault(current, lineno)
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        if current is None:
            raise ConfigError(f"{path}:{lineno}: key outside of any [section]")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.split("#", 1)[0].strip()
        if key in sections[current]:
            raise ConfigError(f"{path}:{lineno}: duplicate key {key!r} in [{current}]")
        sections[current][key] = (value, lineno)
    sections["__lines__"] = {name: ("", line) for name, line in section_lines.items()}
    return sections


def _cast_int(value: str) -> int:
    return int(value)


def _cast_float(value: str) -> float:
    return float(value)


def _cast_str(value: str) -> str:
    return value


def _cast_int_list(value: str) -> tuple[int, ...]:
    return tuple(int(v.strip()) for v in value.split(",") if v.strip())


def _cast_float_list(value: str) -> tuple[float, ...]:
    return tuple(float(v.strip()) for v in value.split(",") if v.strip())


def _cast_str_list(value: str) -> tuple[str, ...]:
    return tuple(v.strip() for v in value.split(",") if v.strip())


_SCHEMA = {
    "diffusion": {
        "timesteps": _cast_int,
        "beta_start": _cast_float,
        "beta_end": _cast_float,
        "sigma_mode": _cast_str,
    },
    "data": {
        "n": _cast_int,
        "components": _cast_int,
        "radius": _cast_float,
        "std": _cast_float,
    },
    "model": {
        "hidden": _cast_int_list,
        "activation": _cast_str,
        "time_features": _cast_int,
    },
    "federated": {
        "clients": _cast_int,
        "contributing": _cast_int,
        "rounds": _cast_int,
        "local_epochs": _cast_int,
        "lr": _cast_float,
        "mu": _cast_float,
        "variant": _cast_str,
        "bitwidth": _cast_int,
        "batch_size": _cast_int,
        "seed": _cast_int,
        "eval_every": _cast_int,
        "eval_samples": _cast_int,
        "calib_samples": _cast_int,
    },
    "partition": {
        "mode": _cast_str,
        "skew_level": _cast_int,
    },
    "grid": {
        "clients": _cast_int_list,
        "contributing": _cast_int_list,
        "contribution": _cast_float_list,
        "rounds": _cast_int_list,
        "local_epochs": _cast_int_list,
        "variant": _cast_str_list,
        "bitwidth": _cast_int_list,
        "skew_level": _cast_int_list,
    },
}

_GRID_FIELDS = {
    "clients": "clients",
    "contributing": "contributing",
    "contribution": "contribution",
    "rounds": "rounds",
    "local_epochs": "local_epochs",
    "variant": "variants",
    "bitwidth": "bitwidths",
    "skew_level": "skew_levels",
}


def _extract(path: Path, sections, name: str) -> dict:
    """Cast every key of one section and report the first unknown one."""
    schema = _SCHEMA[name]
    values: dict = {}
    for key, (raw, lineno) in sections.get(name, {}).items():
        if key not in schema:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r} in [{name}]")
        try:
            values[key] = schema[key](raw)
        except ValueError as exc:
            raise ConfigError(f"{path}:{lineno}: invalid value for {key!r}: {raw!r}") from exc
    return values


def load_config(path: str | Path) -> AppConfig:
    """Parse and validate an experiment file; every invariant holds on return."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    sections = _parse_sections(path)
    section_lines = sections.pop("__lines__")
    for name in sections:
        if name not in _SCHEMA:
            raise ConfigError(f"{path}:{section_lines[name][1]}: unknown section [{name}]")

    diffusion = DiffusionConfig(**_extract(path, sections, "diffusion"))
    if diffusion.sigma_mode not in SIGMA_MODES:
        raise ConfigError(f"sigma_mode must be one of {SIGMA_MODES}")
    data = DataConfig(**_extract(path, sections, "data"))
    model = ModelConfig(**_extract(path, sections, "model"))
    federated = FedConfig(**_extract(path, sections, "federated"))
    if federated.variant == "prox" and federated.mu <= 0:
        raise ConfigError(
            f"variant=prox requires mu > 0, got mu={federated.mu}"
        )

    part_values = _extract(path, sections, "partition")
    mode = part_values.get("mode", "iid")
    if mode not in PARTITION_MODES:
        raise ConfigError(f"partition mode must be one of {PARTITION_MODES}, got {mode!r}")
    partition = PartitionSpec(
        partitions=federated.clients,
        mode=mode,
        skew_level=part_values.get("skew_level", 1),
        seed=derive_seed(federated.seed, "partition"),
    )

    grid_values = _extract(path, sections, "grid")
    grid = ExperimentGrid(**{_GRID_FIELDS[k]: v for k, v in grid_values.items()})

    app = AppConfig(
        federated=federated,
        diffusion=diffusion,
        partition=partition,
        grid=grid,
        data=data,
        model=model,
    )
    grid_combos(app)  # every combination must be individually valid
    return app


@dataclass(frozen=True)
class GridEntry:
    """One resolved run of a sweep."""

    name: str
    federated: FedConfig
    partition: PartitionSpec


def grid_combos(app: AppConfig) -> list[GridEntry]:
    """Cross product of the grid lists over the base configuration."""
    grid = app.grid
    base = app.federated
    entries: list[GridEntry] = []
    for clients in grid.clients or (base.clients,):
        if grid.contributing:
            k_values = grid.contributing
        elif grid.contribution:
            k_values = tuple(max(1, round(f * clients)) for f in grid.contribution)
        else:
            k_values = (min(base.contributing, clients),)
        for contributing in k_values:
            for rounds in grid.rounds or (base.rounds,):
                for local_epochs in grid.local_epochs or (base.local_epochs,):
                    for variant in grid.variants or (base.variant,):
                        for bitwidth in grid.bitwidths or (base.bitwidth,):
                            for skew_level in grid.skew_levels or (None,):
                                try:
                                    fed = replace(
                                        base,
                                        clients=clients,
                                        contributing=contributing,
                                        rounds=rounds,
                                        local_epochs=local_epochs,
                                        variant=variant,
                                        bitwidth=bitwidth,
                                    )
                                except ConfigError as exc:
                                    raise ConfigError(f"invalid grid combination: {exc}") from exc
                                if variant == "prox" and fed.mu <= 0:
                                    raise ConfigError(
                                        "grid includes variant=prox but mu is "
                                        f"{fed.mu}; prox requires mu > 0"
                                    )
                                if skew_level is None:
                                    pspec = replace(app.partition, partitions=clients)
                                else:
                                    pspec = replace(
                                        app.partition,
                                        partitions=clients,
                                        mode="skew",
                                        skew_level=skew_level,
                                    )
                                tag = (
                                    f"{variant}_K{clients}_k{contributing}_R{rounds}"
                                    f"_E{local_epochs}_b{bitwidth}_{pspec.mode}{pspec.skew_level}"
                                )
                                entries.append(GridEntry(tag, fed, pspec))
    return entries


def save_config(app: AppConfig, path: str | Path) -> None:
    """Write a config file that loads back to an identical AppConfig."""
    fed, diff, part = app.federated, app.diffusion, app.partition
    lines = [
        "[diffusion]",
        f"timesteps = {diff.timesteps}",
        f"beta_start = {diff.beta_start!r}",
        f"beta_end = {diff.beta_end!r}",
        f"sigma_mode = {diff.sigma_mode}",
        "",
        "[data]",
        f"n = {app.data.n}",
        f"components = {app.data.components}",
        f"radius = {app.data.radius!r}",
        f"std = {app.data.std!r}",
        "",
        "[model]",
        f"hidden = {','.join(str(h) for h in app.model.hidden)}",
        f"activation = {app.model.activation}",
        f"time_features = {app.model.time_features}",
        "",
        "[federated]",
        f"clients = {fed.clients}",
        f"contributing = {fed.contributing}",
        f"rounds = {fed.rounds}",
        f"local_epochs = {fed.local_epochs}",
        f"lr = {fed.lr!r}",
        f"mu = {fed.mu!r}",
        f"variant = {fed.variant}",
        f"bitwidth = {fed.bitwidth}",
        f"batch_size = {fed.batch_size}",
        f"seed = {fed.seed}",
        f"eval_every = {fed.eval_every}",
        f"eval_samples = {fed.eval_samples}",
        f"calib_samples = {fed.calib_samples}",
        "",
        "[partition]",
        f"mode = {part.mode}",
        f"skew_level = {part.skew_level}",
        "",
        "[grid]",
    ]
    grid = app.grid
    for key, field_name in _GRID_FIELDS.items():
        values = getattr(grid, field_name)
        if values:
            lines.append(f"{key} = {','.join(str(v) for v in values)}")
    lines.append("")
    Path(path).write_text("\n".join(lines))
