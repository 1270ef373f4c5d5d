"""Run configuration: network sizes, schedules, loss weights, ablation flags.

Defaults are the published training recipe; `desk_config` scales everything
down for CPU-sized smoke runs and is what the test suite uses.
"""

import dataclasses
from dataclasses import dataclass, field

import yaml


@dataclass
class NetworkConfig:
    field_depth: int = 8
    field_width: int = 256
    field_skip: int = 4  # re-inject the encoded input at this layer
    offset_depth: int = 6
    offset_width: int = 128
    point_bands: int = 10  # positional-encoding bands for field inputs
    deform_bands: int = 6  # windowed bands for the offset-field inputs
    code_dim: int = 32
    code_init_std: float = 0.01
    max_offset: float = 0.1  # tanh output scale of the offset fields, scene units
    weight_grid: int = 32  # blend-weight voxel resolution
    weight_bg_bias: float = 3.0
    weight_bump_amplitude: float = 6.0


@dataclass
class LossWeights:
    color: float = 0.2
    segmentation: float = 0.05
    perceptual: float = 1.0


@dataclass
class OptimizerConfig:
    lr: float = 5e-4
    decay_rate: float = 0.1
    decay_steps: int = 500_000
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    finetune_lr: float = 1e-5
    grad_clip: float = 1.0


@dataclass
class SamplerConfig:
    rays_per_iter: int = 32768
    samples_per_ray: int = 128
    bbox_fraction: float = 0.80
    # (start iter, end iter or None, hand %, arm %) of the in-bbox draw
    phases: tuple = (
        (0, 20_000, 20, 0),
        (20_000, 40_000, 20, 60),
        (40_000, 60_000, 40, 40),
        (60_000, 80_000, 80, 20),
        (80_000, None, 20, 0),
    )
    patch_count: int = 6
    patch_size: int = 32

    def phase_at(self, iteration: int):
        """(hand %, arm %) active at an iteration."""
        for start, end, hand, arm in self.phases:
            if iteration >= start and (end is None or iteration < end):
                return hand, arm
        return 0, 0


@dataclass
class ScheduleConfig:
    iterations: int = 400_000
    multi_id_iterations: int = 600_000
    finetune_iterations: int = 50_000
    nonrigid_start: int = 100_000  # D_nr joins the optimization here
    hann_ramp: int = 80_000  # window alpha ramps 0 -> deform_bands over this span
    checkpoint_every: int = 10_000
    log_every: int = 100


@dataclass
class AblationFlags:
    hand_deformation: bool = True
    hand_background: bool = True
    separate_hands: bool = False
    jaw_conditioning: bool = True
    arm_class: bool = True
    zero_body_on_hand_rays: bool = False
    forced_routing_iters: int = 0  # route by ground-truth masks before this iteration

    KNOWN = ("hand_deformation", "hand_background", "separate_hands", "jaw", "arm_class")

    def disable(self, name: str) -> None:
        if name == "jaw":
            self.jaw_conditioning = False
        elif name in ("hand_deformation", "hand_background", "arm_class"):
            setattr(self, name, False)
        elif name == "separate_hands":
            self.separate_hands = True
        else:
            raise ValueError(f"unknown ablation {name!r}; known: {self.KNOWN}")


@dataclass
class RunConfig:
    network: NetworkConfig = field(default_factory=NetworkConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    ablation: AblationFlags = field(default_factory=AblationFlags)
    seed: int = 0

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["sampler"]["phases"] = [list(p) for p in self.sampler.phases]
        return out

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        cfg = cls()
        for section_name, section_cls in (
            ("network", NetworkConfig),
            ("loss", LossWeights),
            ("optimizer", OptimizerConfig),
            ("sampler", SamplerConfig),
            ("schedule", ScheduleConfig),
            ("ablation", AblationFlags),
        ):
            section_doc = doc.get(section_name, {})
            section = getattr(cfg, section_name)
            known = {f.name for f in dataclasses.fields(section_cls)}
            for key, value in section_doc.items():
                if key not in known:
                    raise ValueError(f"unknown config key {section_name}.{key}")
                if key == "phases":
                    value = tuple(tuple(None if v is None else v for v in p) for p in value)
                setattr(section, key, value)
        if "seed" in doc:
            cfg.seed = int(doc["seed"])
        return cfg

    def save(self, path) -> None:
        with open(path, "w") as fh:
            yaml.safe_dump(self.to_dict(), fh, sort_keys=True)

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path) as fh:
            return cls.from_dict(yaml.safe_load(fh) or {})

    def apply_overrides(self, overrides: dict) -> None:
        """dotted-key overrides, e.g. {"sampler.rays_per_iter": 512}; flags beat file values."""
        for dotted, value in overrides.items():
            if dotted == "seed":
                self.seed = int(value)
                continue
            section_name, _, key = dotted.partition(".")
            section = getattr(self, section_name, None)
            if section is None or not key or not hasattr(section, key):
                raise ValueError(f"unknown config key {dotted!r}")
            current = getattr(section, key)
            if isinstance(current, bool):
                value = value if isinstance(value, bool) else str(value).lower() in ("1", "true", "yes", "on")
            elif isinstance(current, int):
                value = int(value)
            elif isinstance(current, float):
                value = float(value)
            setattr(section, key, value)


def desk_config(seed: int = 0) -> RunConfig:
    """CPU-sized preset: small networks, small ray batches, schedule milestones
    scaled to a few-thousand-step budget. Used by the acceptance suite."""
    cfg = RunConfig(seed=seed)
    cfg.network.field_depth = 4
    cfg.network.field_width = 96
    cfg.network.field_skip = 2
    cfg.network.offset_depth = 3
    cfg.network.offset_width = 64
    cfg.network.weight_grid = 24
    cfg.sampler.rays_per_iter = 256
    cfg.sampler.samples_per_ray = 28
    cfg.sampler.patch_count = 2
    cfg.sampler.patch_size = 8
    cfg.sampler.phases = (
        (0, 250, 20, 0),
        (250, 500, 20, 60),
        (500, 750, 40, 40),
        (750, 1000, 80, 20),
        (1000, None, 20, 0),
    )
    cfg.schedule.iterations = 4000
    cfg.schedule.multi_id_iterations = 5000
    cfg.schedule.finetune_iterations = 1500
    cfg.schedule.nonrigid_start = 10_000_000  # keep D_nr out of short smoke runs
    cfg.schedule.hann_ramp = 1000
    cfg.schedule.checkpoint_every = 1000
    cfg.schedule.log_every = 50
    return cfg
