from enum import Enum
from pathlib import Path
from typing import List, Dict, Any, Optional, Union

import numpy as np
from pydantic import BaseModel, Field, model_validator

from tempest.helpers import parse_override, set_dotted


class Method(str, Enum):
    POTOBIM = "potobim"
    MCD = "mcd"
    SGLD = "sgld"
    DIP = "dip"


class TaskKind(str, Enum):
    DENOISE = "denoise"
    SR = "sr"
    INPAINT = "inpaint"
    CT = "ct"


class Likelihood(str, Enum):
    HETERO = "hetero"
    MSE = "mse"


class PriorScaling(str, Enum):
    SQRT_T = "sqrt_t"
    INVERSE_T = "inverse_t"
    UNSCALED = "unscaled"


class WeightMode(str, Enum):
    POINT = "point"
    DROPOUT = "dropout"
    MEANFIELD = "meanfield"


class PhantomKind(str, Enum):
    SHEPP_LOGAN = "shepp-logan"
    DISK = "disk"
    TEXT_MASK = "text-mask"


# Desk-scale iteration counts per task.
DESK_ITERATIONS = {
    TaskKind.DENOISE: 5000,
    TaskKind.INPAINT: 5000,
    TaskKind.SR: 3000,
    TaskKind.CT: 10000,
}

# Tasks whose forward operator maps pixels to pixels, so the variance head survives it.
# SR counts: nearest-neighbour downsampling selects pixels without mixing them, so the
# variance channel is downsampled like the image. Radon sums pixels and has no variance head.
PIXELWISE_TASKS = {TaskKind.DENOISE, TaskKind.INPAINT, TaskKind.SR}


class NetConfig(BaseModel):
    depth: int = Field(default=4, ge=2)
    channels: int = Field(default=32, ge=1)
    skip_channels: int = Field(default=4, ge=1)
    in_channels: int = Field(default=8, ge=1)
    out_channels: int = Field(default=2, ge=1, le=2)
    heteroscedastic: bool = True
    sigma_init: float = Field(default=1e-4, gt=0, description="Initial posterior std of every weight")

    @model_validator(mode="before")
    @classmethod
    def _default_head(cls, data: Any) -> Any:
        if isinstance(data, dict) and data.get("out_channels") is None:
            data = dict(data)
            data["out_channels"] = 2 if data.get("heteroscedastic", True) else 1
        return data

    @model_validator(mode="after")
    def _check_head(self) -> "NetConfig":
        expected = 2 if self.heteroscedastic else 1
        if self.out_channels != expected:
            raise ValueError(
                f"heteroscedastic={self.heteroscedastic} requires out_channels={expected}, got {self.out_channels}"
            )
        return self


class TemperConfig(BaseModel):
    temperature: float = Field(gt=0, description="Posterior temperature T")
    sigma_prior: float = Field(gt=0, description="Prior standard deviation")
    prior_scaling: PriorScaling = PriorScaling.SQRT_T


class TaskSpec(BaseModel):
    kind: TaskKind
    noise_std: float = Field(default=0.1, ge=0)
    scale: int = Field(default=4, ge=1)
    n_angles: int = Field(default=45, ge=1)
    angle_step_deg: float = Field(default=4.0, gt=0)
    log_domain: bool = False
    log_offset: float = Field(default=1e-2, gt=0)

    def angles(self) -> np.ndarray:
        """Projection angles in radians."""
        return np.deg2rad(np.arange(self.n_angles) * self.angle_step_deg)

    @property
    def pixelwise(self) -> bool:
        return self.kind in PIXELWISE_TASKS


class RunConfig(BaseModel):
    """Everything one training run needs besides the observation itself.

    Method-specific fields (``weight_decay`` λ, ``lr_decay`` γ, ``dropout_p`` p and
    ``temper``) must be set exactly for the methods that use them.
    """

    method: Method
    task: TaskSpec
    iterations: int = Field(ge=1)
    lr: float = Field(default=2e-3, gt=0)
    weight_decay: Optional[float] = Field(default=None, ge=0, lt=1)
    lr_decay: Optional[float] = Field(default=None, gt=0, le=1)
    dropout_p: Optional[float] = Field(default=None, gt=0, lt=1)
    temper: Optional[TemperConfig] = None
    likelihood: Optional[Likelihood] = None
    net: NetConfig = Field(default_factory=NetConfig)
    mc_samples: int = Field(default=1, ge=1)
    eval_every: int = Field(default=50, ge=1)
    eval_samples: int = Field(default=25, ge=2)
    sgld_noise_scale: float = Field(default=1.0, ge=0)
    sgld_burn_in: float = Field(default=0.5, ge=0, lt=1)
    seed: int = 0

    @model_validator(mode="after")
    def _check_method_fields(self) -> "RunConfig":
        required = {
            Method.POTOBIM: {"temper"},
            Method.MCD: {"dropout_p", "weight_decay"},
            Method.SGLD: {"lr_decay", "weight_decay"},
            Method.DIP: {"weight_decay"},
        }[self.method]
        for name in ("temper", "dropout_p", "weight_decay", "lr_decay"):
            present = getattr(self, name) is not None
            if name in required and not present:
                raise ValueError(f"method {self.method.value} requires {name}")
            if name not in required and present:
                raise ValueError(f"method {self.method.value} does not use {name}")

        if self.likelihood is None:
            use_hetero = self.method != Method.DIP and self.task.pixelwise
            self.likelihood = Likelihood.HETERO if use_hetero else Likelihood.MSE
        if self.likelihood == Likelihood.HETERO and not self.task.pixelwise:
            raise ValueError(f"task {self.task.kind.value} does not support the heteroscedastic likelihood")

        hetero = self.likelihood == Likelihood.HETERO
        if self.net.heteroscedastic != hetero:
            net_fields = self.net.model_dump(exclude={"out_channels", "heteroscedastic"})
            self.net = NetConfig(heteroscedastic=hetero, **net_fields)
        return self

    @property
    def bayesian(self) -> bool:
        return self.method != Method.DIP

    @classmethod
    def for_method(cls, method: Method, task: TaskSpec, **overrides: Any) -> "RunConfig":
        """
        Build a configuration with the method's defaults filled in.

        Iterations default to the desk-scale count of the task and the method's
        hyperparameters to their tuned values for that task.

        Args:
            method: Reconstruction method
            task: Task description
            **overrides: Any RunConfig field

        Returns:
            Validated RunConfig
        """
        from tempest.presets import desk_iterations, tuned_values

        method = Method(method)
        task = task if isinstance(task, TaskSpec) else TaskSpec(**task)
        data: Dict[str, Any] = {"method": method, "task": task, "iterations": desk_iterations(task.kind)}
        tuned = tuned_values(method, task.kind)
        if method == Method.POTOBIM:
            data["temper"] = TemperConfig(**tuned)
        else:
            data.update(tuned)
        data.update(overrides)
        return cls(**data)


class TraceRow(BaseModel):
    iteration: int
    loss: float
    nll: float
    kl: Optional[float] = None
    psnr: Optional[float] = None
    lr: float
    wall_time: float


class LossReport(BaseModel):
    nll: float
    kl: float
    elbo_t: float = Field(description="T * kl + nll")
    temperature: float
    mc_samples: int


class SearchAxis(BaseModel):
    name: str
    lower: float
    upper: float

    @model_validator(mode="after")
    def _check_bounds(self) -> "SearchAxis":
        if not self.lower < self.upper:
            raise ValueError(f"axis {self.name}: lower {self.lower} must be < upper {self.upper}")
        return self


class SearchSpace(BaseModel):
    """Two log10-bounded axes; points are stored in log10 coordinates."""

    axes: List[SearchAxis] = Field(min_length=2, max_length=2)

    @property
    def names(self) -> List[str]:
        return [axis.name for axis in self.axes]

    @property
    def lower(self) -> np.ndarray:
        return np.array([axis.lower for axis in self.axes])

    @property
    def upper(self) -> np.ndarray:
        return np.array([axis.upper for axis in self.axes])

    def to_unit(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points, dtype=float) - self.lower) / (self.upper - self.lower)

    def from_unit(self, unit: np.ndarray) -> np.ndarray:
        return self.lower + np.asarray(unit, dtype=float) * (self.upper - self.lower)

    def contains(self, point: np.ndarray) -> bool:
        point = np.asarray(point, dtype=float)
        return bool(np.all(point >= self.lower) and np.all(point <= self.upper))


class BoObservation(BaseModel):
    round: int
    point: List[float] = Field(description="log10 coordinates")
    value: Optional[float] = None
    wall_time: float = 0.0
    status: str = "ok"
    error: Optional[str] = None


class PhantomSpec(BaseModel):
    kind: PhantomKind = PhantomKind.SHEPP_LOGAN
    size: int = Field(default=64, ge=32)
    seed: int = 0


class BoSettings(BaseModel):
    iterations: int = Field(default=11, ge=0)
    batch: int = Field(default=4, ge=1, le=4)
    space: Optional[SearchSpace] = None
    init_points: Optional[List[List[float]]] = None
    grid_size: int = Field(default=101, ge=2)


class ExperimentManifest(BaseModel):
    name: str = "experiment"
    image: Optional[str] = None
    image_size: Optional[int] = Field(default=None, ge=32, description="Smooth and resize the image to this size")
    phantom: Optional[PhantomSpec] = None
    observation: Optional[str] = None
    mask: Optional[str] = None
    run: RunConfig
    bo: BoSettings = Field(default_factory=BoSettings)
    output_dir: str = "runs/experiment"

    @model_validator(mode="after")
    def _check_sources(self) -> "ExperimentManifest":
        if self.image is None and self.phantom is None and self.observation is None:
            raise ValueError("manifest needs an image, a phantom or an observation")
        if self.image is not None and self.phantom is not None:
            raise ValueError("image and phantom are mutually exclusive")
        if self.run.task.kind == TaskKind.INPAINT and self.mask is None:
            if self.phantom is None or self.phantom.kind != PhantomKind.TEXT_MASK:
                raise ValueError("inpainting needs a mask path or a text-mask phantom")
        return self

    def config_key(self) -> Dict[str, Any]:
        """Manifest contents that identify a configuration regardless of seed and location."""
        data = self.model_dump(mode="json", exclude={"output_dir"})
        data["run"].pop("seed", None)
        if data.get("phantom"):
            data["phantom"].pop("seed", None)
        return data

    @classmethod
    def load(cls, path: Union[str, Path]) -> "ExperimentManifest":
        return cls.model_validate_json(Path(path).read_text())

    def dump(self, path: Union[str, Path]) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.model_dump_json(indent=2))


def apply_overrides(manifest: ExperimentManifest, overrides: List[str]) -> ExperimentManifest:
    """
    Apply ``key=value`` overrides with dotted keys, e.g. "run.temper.temperature=1e-6".

    Args:
        manifest: Base manifest
        overrides: Override strings; values are parsed as JSON when possible

    Returns:
        A new, re-validated manifest
    """
    data = manifest.model_dump(mode="json")
    for text in overrides:
        key, value = parse_override(text)
        set_dotted(data, key, value)
    return ExperimentManifest.model_validate(data)
