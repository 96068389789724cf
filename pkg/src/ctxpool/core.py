"""Domain types and the calibrated cost model.

Every duration here is in *emulated* seconds.  Wall-clock scaling happens
once, at sleep time, in :class:`ctxpool.clock.Clock`.
"""

from __future__ import annotations

import configparser
import enum
import hashlib
import itertools
import json
import math
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

GB = 1_000_000_000
TIME_SCALE_ENV = "CTXPOOL_TIME_SCALE"


class Awareness(str, enum.Enum):
    AGNOSTIC = "AGNOSTIC"
    PARTIAL = "PARTIAL"
    FULL = "FULL"


class Stage(str, enum.Enum):
    FS_FETCH = "FS_FETCH"
    DISK_LOAD = "DISK_LOAD"
    GPU_LOAD = "GPU_LOAD"
    INFER = "INFER"
    DISPATCH = "DISPATCH"


@dataclass(frozen=True)
class GpuModel:
    name: str
    release_year: int
    speed_factor: float
    gpu_load_bandwidth: float
    count: int = 0  # units in the reference cluster

    def __post_init__(self):
        if self.speed_factor <= 0:
            raise ValueError(f"speed_factor must be positive, got {self.speed_factor}")
        if self.gpu_load_bandwidth <= 0:
            raise ValueError("gpu_load_bandwidth must be positive")


A10 = "NVIDIA A10"
TITAN_X_PASCAL = "NVIDIA TITAN X (Pascal)"

# name, release year, count in the reference cluster
_TABLE = [
    ("NVIDIA Quadro RTX 6000", 2018, 106),
    (A10, 2021, 78),
    (TITAN_X_PASCAL, 2016, 69),
    ("NVIDIA GeForce GTX 1080 Ti", 2017, 63),
    ("NVIDIA RTX 6000 Ada Generation", 2022, 36),
    ("NVIDIA GeForce GTX TITAN X", 2015, 34),
    ("NVIDIA A40", 2020, 26),
    ("NVIDIA H100 80GB HBM3", 2023, 15),
]

DEFAULT_MODEL_BYTES = int(3.7 * GB)
DEFAULT_HOST_MEMORY_BYTES = int(7.4 * GB)
DEFAULT_DEPENDENCY_BYTES = int(10.5 * GB)

# Per-task model load (disk -> host memory -> GPU) on the reference GPU.
REFERENCE_LOAD_SECONDS = 32.0
DEFAULT_DISK_BANDWIDTH = 240e6


def _reference_gpu_load_bandwidth() -> float:
    disk_seconds = DEFAULT_MODEL_BYTES / DEFAULT_DISK_BANDWIDTH
    return DEFAULT_MODEL_BYTES / (REFERENCE_LOAD_SECONDS - disk_seconds)


def interpolated_speed(release_year: int) -> float:
    """Relative throughput by release year: TITAN X (2016) = 0.5, A10 (2021) = 1.0."""
    return 0.5 + 0.1 * (release_year - 2016)


def default_catalog() -> dict[str, GpuModel]:
    bw = _reference_gpu_load_bandwidth()
    return {
        name: GpuModel(name, year, round(interpolated_speed(year), 6), bw, count)
        for name, year, count in _TABLE
    }


@dataclass(frozen=True)
class ResourceRequest:
    cores: int = 2
    memory_bytes: int = 10 * GB
    disk_bytes: int = 20 * GB
    gpus: int = 1

    def __post_init__(self):
        for name in ("cores", "memory_bytes", "disk_bytes", "gpus"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.gpus not in (0, 1):
            raise ValueError("gpus must be 0 or 1")

    def fits(self, capacity: "ResourceRequest") -> bool:
        return (
            self.cores <= capacity.cores
            and self.memory_bytes <= capacity.memory_bytes
            and self.disk_bytes <= capacity.disk_bytes
            and self.gpus <= capacity.gpus
        )


DEFAULT_TASK_RESOURCES = ResourceRequest()
DEFAULT_WORKER_CAPACITY = ResourceRequest(cores=2, memory_bytes=10 * GB, disk_bytes=70 * GB, gpus=1)


@dataclass(frozen=True)
class BuildCostDescriptor:
    """Which emulated stages a fresh context build performs."""

    disk_load: bool = True
    gpu_load: bool = True


def recipe_hash(
    code_ref: str,
    dependency_bytes: int,
    model_bytes: int,
    host_memory_bytes: int,
    builder: BuildCostDescriptor = BuildCostDescriptor(),
) -> str:
    fields = {
        "builder": {"disk_load": bool(builder.disk_load), "gpu_load": bool(builder.gpu_load)},
        "code_ref": str(code_ref),
        "dependency_bytes": int(dependency_bytes),
        "host_memory_bytes": int(host_memory_bytes),
        "model_bytes": int(model_bytes),
    }
    canonical = json.dumps(fields, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()


@dataclass(frozen=True)
class ContextRecipe:
    code_ref: str
    dependency_bytes: int
    model_bytes: int
    host_memory_bytes: int
    builder: BuildCostDescriptor = BuildCostDescriptor()
    context_id: str = field(default="", compare=False)

    def __post_init__(self):
        for name in ("dependency_bytes", "model_bytes", "host_memory_bytes"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        digest = recipe_hash(
            self.code_ref, self.dependency_bytes, self.model_bytes, self.host_memory_bytes, self.builder
        )
        if self.context_id and self.context_id != digest:
            raise ValueError("context_id does not match recipe contents")
        object.__setattr__(self, "context_id", digest)

    @property
    def total_bytes(self) -> int:
        return self.dependency_bytes + self.model_bytes

    def blobs(self) -> dict[str, tuple[str, int]]:
        """Content key -> (kind, bytes) for every blob a build needs."""
        out = {}
        for kind, size in (("DEPENDENCIES", self.dependency_bytes), ("MODEL_BLOB", self.model_bytes)):
            if size:
                out[f"{self.context_id}:{kind.lower()}"] = (kind, size)
        out[f"{self.context_id}:code"] = ("CODE", 0)
        return out

    def to_dict(self) -> dict:
        d = asdict(self)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "ContextRecipe":
        builder = BuildCostDescriptor(**d.get("builder", {}))
        return cls(
            code_ref=d["code_ref"],
            dependency_bytes=int(d["dependency_bytes"]),
            model_bytes=int(d["model_bytes"]),
            host_memory_bytes=int(d["host_memory_bytes"]),
            builder=builder,
            context_id=d.get("context_id", ""),
        )


def default_recipe() -> ContextRecipe:
    return ContextRecipe(
        code_ref="pff.load_model",
        dependency_bytes=DEFAULT_DEPENDENCY_BYTES,
        model_bytes=DEFAULT_MODEL_BYTES,
        host_memory_bytes=DEFAULT_HOST_MEMORY_BYTES,
    )


@dataclass(frozen=True)
class InferenceItem:
    item_id: str
    payload_bytes: int = 256
    cost_units: float = 1.0

    def __post_init__(self):
        if self.cost_units <= 0:
            raise ValueError("cost_units must be positive")
        if self.payload_bytes < 0:
            raise ValueError("payload_bytes must be >= 0")


_task_counter = itertools.count()


@dataclass(frozen=True)
class TaskSpec:
    items: tuple[InferenceItem, ...]
    awareness: Awareness = Awareness.FULL
    context_id: Optional[str] = None
    # What the task loads; AGNOSTIC/PARTIAL tasks carry it as a plain input.
    recipe: Optional[ContextRecipe] = None
    resources: ResourceRequest = DEFAULT_TASK_RESOURCES
    task_id: str = ""
    attempt: int = 0

    def __post_init__(self):
        object.__setattr__(self, "items", tuple(self.items))
        object.__setattr__(self, "awareness", Awareness(self.awareness))
        if not self.items:
            raise ValueError("a task needs at least one inference item")
        if self.attempt < 0:
            raise ValueError("attempt must be >= 0")
        if self.awareness is Awareness.FULL:
            if self.context_id is None and self.recipe is not None:
                object.__setattr__(self, "context_id", self.recipe.context_id)
            if self.context_id is None:
                raise ValueError("FULL tasks require a context_id")
            if self.recipe is not None and self.recipe.context_id != self.context_id:
                raise ValueError("recipe does not match context_id")
        if not self.task_id:
            object.__setattr__(self, "task_id", f"t{next(_task_counter)}")

    @property
    def batch_size(self) -> int:
        return len(self.items)

    @property
    def cost_units(self) -> float:
        return sum(i.cost_units for i in self.items)

    def with_attempt(self, attempt: int) -> "TaskSpec":
        return replace(self, attempt=attempt)


@dataclass(frozen=True)
class CostModel:
    fs_aggregate_bandwidth: float = 84e9 / 8
    fs_max_concurrent_ops: int = 94_000
    disk_bandwidth: float = DEFAULT_DISK_BANDWIDTH
    peer_bandwidth: float = 10e9 / 8
    per_inference_seconds_reference: float = 0.29
    invoke_dispatch_overhead_seconds: float = 0.05
    time_scale: float = 0.002

    def __post_init__(self):
        for name in (
            "fs_aggregate_bandwidth",
            "disk_bandwidth",
            "peer_bandwidth",
            "per_inference_seconds_reference",
            "time_scale",
        ):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.fs_max_concurrent_ops < 1:
            raise ValueError("fs_max_concurrent_ops must be >= 1")
        if self.invoke_dispatch_overhead_seconds < 0:
            raise ValueError("invoke_dispatch_overhead_seconds must be >= 0")

    def stage_duration(
        self,
        stage: Stage,
        amount: float = 0.0,
        gpu: Optional[GpuModel] = None,
        concurrent_fs_readers: int = 1,
    ) -> float:
        stage = Stage(stage)
        if amount < 0:
            raise ValueError(f"negative amount for {stage.value}: {amount}")
        if stage is Stage.FS_FETCH:
            if concurrent_fs_readers < 1:
                raise ValueError("concurrent_fs_readers must be >= 1")
            share = self.fs_aggregate_bandwidth / min(concurrent_fs_readers, self.fs_max_concurrent_ops)
            return amount / share
        if stage is Stage.DISK_LOAD:
            return amount / self.disk_bandwidth
        if stage is Stage.DISPATCH:
            return self.invoke_dispatch_overhead_seconds
        if gpu is None:
            raise ValueError(f"{stage.value} needs a GPU model")
        if stage is Stage.GPU_LOAD:
            return amount / gpu.gpu_load_bandwidth
        return amount * self.per_inference_seconds_reference / gpu.speed_factor

    def peer_seconds(self, nbytes: float) -> float:
        if nbytes < 0:
            raise ValueError("negative byte count")
        return nbytes / self.peer_bandwidth

    def wall_seconds(self, emulated: float) -> float:
        """Wall-clock sleep for an emulated duration, rounded up to whole microseconds."""
        if emulated <= 0:
            return 0.0
        return math.ceil(emulated * self.time_scale * 1e6) / 1e6


def calibrated_per_inference_seconds(
    target_pool_seconds: float, gpus: Sequence[GpuModel]
) -> float:
    """Reference per-inference time that makes ``gpus`` average ``target_pool_seconds``.

    The pool average is N / sum(1 / t_i), i.e. the time per inference of the
    pool as a whole multiplied by its size.
    """
    total_speed = sum(g.speed_factor for g in gpus)
    return target_pool_seconds * total_speed / len(gpus)


@dataclass(frozen=True)
class Config:
    cost: CostModel = CostModel()
    catalog: Mapping[str, GpuModel] = field(default_factory=default_catalog)
    task_resources: ResourceRequest = DEFAULT_TASK_RESOURCES
    worker_capacity: ResourceRequest = DEFAULT_WORKER_CAPACITY
    heartbeat_interval: float = 5.0
    heartbeat_timeout: float = 15.0
    max_concurrent_peer_serves: int = 4
    peer_transfer: bool = True

    def gpu(self, name: str) -> GpuModel:
        try:
            return self.catalog[name]
        except KeyError:
            raise ValueError(f"unknown GPU model {name!r}") from None


def _resources_from_section(section: Mapping[str, str], base: ResourceRequest) -> ResourceRequest:
    values = {}
    for key in ("cores", "gpus"):
        if key in section:
            values[key] = int(section[key])
    for key in ("memory_bytes", "disk_bytes"):
        if key in section:
            values[key] = int(float(section[key]))
    return replace(base, **values)


def load_config(path: Optional[os.PathLike | str] = None, env: Mapping[str, str] = os.environ) -> Config:
    """Read an INI-style config file; ``CTXPOOL_TIME_SCALE`` overrides time_scale.

    See ``ctxpool.ini`` at the repository root for every recognised key.
    """
    cfg = Config()
    if path is not None:
        parser = configparser.ConfigParser()
        with open(path) as fh:
            parser.read_file(fh)
        cost_kwargs = {}
        if parser.has_section("cost"):
            for key, value in parser["cost"].items():
                if key not in CostModel.__dataclass_fields__:
                    raise ValueError(f"unknown cost key {key!r}")
                cost_kwargs[key] = int(float(value)) if key == "fs_max_concurrent_ops" else float(value)
        catalog = dict(cfg.catalog)
        for section in parser.sections():
            if not section.startswith("gpu:"):
                continue
            name = section[4:].strip()
            s = parser[section]
            base = catalog.get(name)
            catalog[name] = GpuModel(
                name=name,
                release_year=int(s.get("release_year", base.release_year if base else 0)),
                speed_factor=float(s.get("speed_factor", base.speed_factor if base else 1.0)),
                gpu_load_bandwidth=float(
                    s.get("gpu_load_bandwidth", base.gpu_load_bandwidth if base else _reference_gpu_load_bandwidth())
                ),
                count=int(s.get("count", base.count if base else 0)),
            )
        sched = parser["scheduler"] if parser.has_section("scheduler") else {}
        cfg = Config(
            cost=CostModel(**cost_kwargs),
            catalog=catalog,
            task_resources=_resources_from_section(
                parser["task_resources"] if parser.has_section("task_resources") else {}, cfg.task_resources
            ),
            worker_capacity=_resources_from_section(
                parser["worker_capacity"] if parser.has_section("worker_capacity") else {}, cfg.worker_capacity
            ),
            heartbeat_interval=float(sched.get("heartbeat_interval", cfg.heartbeat_interval)),
            heartbeat_timeout=float(sched.get("heartbeat_timeout", cfg.heartbeat_timeout)),
            max_concurrent_peer_serves=int(sched.get("max_concurrent_peer_serves", cfg.max_concurrent_peer_serves)),
            peer_transfer=str(sched.get("peer_transfer", "true")).lower() in ("1", "true", "yes", "on"),
        )
    if env.get(TIME_SCALE_ENV):
        cfg = replace(cfg, cost=replace(cfg.cost, time_scale=float(env[TIME_SCALE_ENV])))
    return cfg


def make_items(n: int, start: int = 0, prefix: str = "claim") -> list[InferenceItem]:
    return [InferenceItem(f"{prefix}-{i}") for i in range(start, start + n)]


def verdict_for(item_id: str) -> str:
    digest = hashlib.sha256(item_id.encode()).digest()
    return VERDICTS[int.from_bytes(digest[:8], "big") % 3]


VERDICTS = ("SUPPORTED", "REFUTED", "NOT ENOUGH INFO")


def chunked(seq: Sequence, size: int) -> Iterable[Sequence]:
    for i in range(0, len(seq), size):
        yield seq[i : i + size]
