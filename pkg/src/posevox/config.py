"""Experiment configuration: one JSON file drives every command.

The file is a nested object mirroring the dataclasses below; every
key is optional and defaults are production values.  Unknown keys are
rejected with the offending dotted path — a silently ignored typo in
an ablation config is the main operational hazard this guards
against.  Relative paths inside a config resolve against the config
file's directory.

Schema (all keys optional)::

    {
      "rig": "path/to/rig.json",        // empty -> built-in 5-camera rig
      "mode": "analytic" | "net",
      "seed": 0,
      "root_joint": 0,
      "space":   {"extent": [8000,8000,2000], "coarse_resolution": [80,80,20]},
      "fine":    {"resolution": [64,64,64], "edge_mm": 2000, "beta": 8.0,
                  "root_window_mm": 300.0, "limb_slack_mm": 200.0},
      "heatmap": {"sigma_px": 3.0},
      "noise":   {"joint_dropout_prob": 0, "jitter_sigma_px": 0,
                  "spurious_peak_rate": 0, "peak_amplitude": [0.3, 0.9]},
      "nms":     {"threshold": 0.3, "net_threshold": 0.55, "max_keep": 10},
      "data":    {"n_scenes": 100, "people_min": 1, "people_max": 3},
      "train":   {"epochs": 10, "batch_size": 8, "lr_schedule": [[1, 1e-4]],
                  "optimizer": "adam", "cpn_width": 16, "prn_width": 16,
                  "coarse_resolution": [40,40,10], "fine_resolution": [16,16,16],
                  "teacher_forcing_epochs": 10,
                  "cpn_weight": 1.0, "prn_weight": 1.0},
      "eval":    {"ap_thresholds": [25,50,100,150],
                  "recall_thresholds": [100,200,300,500],
                  "align_root": false, "pcp_alpha": 0.5},
      "ablate":  {"views": [1,3,5],
                  "grids": [[48,48,12],[64,64,16],[80,80,20]]}
    }

``nms.threshold`` applies to analytic score volumes; the net path
uses ``nms.net_threshold`` because logistic-squashed raw scores put
the empty-space background at 0.5 rather than 0.
"""

import dataclasses
import json
import os


def _ascending(seq):
    return all(b > a for a, b in zip(seq, seq[1:]))


@dataclasses.dataclass
class SpaceConfig:
    extent: tuple = (8000.0, 8000.0, 2000.0)
    coarse_resolution: tuple = (80, 80, 20)

    def __post_init__(self):
        self.extent = tuple(float(v) for v in self.extent)
        self.coarse_resolution = tuple(int(v) for v in self.coarse_resolution)
        if len(self.extent) != 3 or min(self.extent) <= 0:
            raise ValueError(f"space.extent must be 3 positive mm: {self.extent}")
        if len(self.coarse_resolution) != 3 or min(self.coarse_resolution) < 1:
            raise ValueError(
                f"space.coarse_resolution must be 3 counts >= 1: "
                f"{self.coarse_resolution}"
            )


@dataclasses.dataclass
class FineConfig:
    resolution: tuple = (64, 64, 64)
    edge_mm: float = 2000.0
    beta: float = 8.0
    root_window_mm: float = 300.0
    limb_slack_mm: float = 200.0

    def __post_init__(self):
        self.resolution = tuple(int(v) for v in self.resolution)
        self.edge_mm = float(self.edge_mm)
        self.beta = float(self.beta)
        self.root_window_mm = float(self.root_window_mm)
        self.limb_slack_mm = float(self.limb_slack_mm)
        if len(self.resolution) != 3 or min(self.resolution) < 1:
            raise ValueError(
                f"fine.resolution must be 3 counts >= 1: {self.resolution}"
            )
        if self.edge_mm <= 0:
            raise ValueError(f"fine.edge_mm must be > 0: {self.edge_mm}")
        if self.beta <= 0:
            raise ValueError(f"fine.beta must be > 0: {self.beta}")
        if self.root_window_mm <= 0:
            raise ValueError(
                f"fine.root_window_mm must be > 0: {self.root_window_mm}"
            )
        if self.limb_slack_mm <= 0:
            raise ValueError(
                f"fine.limb_slack_mm must be > 0: {self.limb_slack_mm}"
            )


@dataclasses.dataclass
class HeatmapConfig:
    sigma_px: float = 3.0

    def __post_init__(self):
        self.sigma_px = float(self.sigma_px)
        if self.sigma_px <= 0:
            raise ValueError(f"heatmap.sigma_px must be > 0: {self.sigma_px}")


@dataclasses.dataclass
class NoiseConfig:
    joint_dropout_prob: float = 0.0
    jitter_sigma_px: float = 0.0
    spurious_peak_rate: float = 0.0
    peak_amplitude: tuple = (0.3, 0.9)

    def __post_init__(self):
        self.peak_amplitude = tuple(float(v) for v in self.peak_amplitude)
        # Full range checks live in synth.NoiseModel; build one now so
        # bad values fail at config load, not mid-run.
        self.to_model()

    def to_model(self):
        from .synth import NoiseModel

        return NoiseModel(
            joint_dropout_prob=float(self.joint_dropout_prob),
            jitter_sigma_px=float(self.jitter_sigma_px),
            spurious_peak_rate=float(self.spurious_peak_rate),
            peak_amplitude=self.peak_amplitude,
        )


@dataclasses.dataclass
class NmsConfig:
    threshold: float = 0.3
    net_threshold: float = 0.55
    max_keep: int = 10

    def __post_init__(self):
        self.threshold = float(self.threshold)
        self.net_threshold = float(self.net_threshold)
        self.max_keep = int(self.max_keep)
        for name, t in (
            ("nms.threshold", self.threshold),
            ("nms.net_threshold", self.net_threshold),
        ):
            if not 0.0 <= t <= 1.0:
                raise ValueError(f"{name} must be in [0,1]: {t}")
        if self.max_keep < 1:
            raise ValueError(f"nms.max_keep must be >= 1: {self.max_keep}")


@dataclasses.dataclass
class DataConfig:
    n_scenes: int = 100
    people_min: int = 1
    people_max: int = 3

    def __post_init__(self):
        self.n_scenes = int(self.n_scenes)
        self.people_min = int(self.people_min)
        self.people_max = int(self.people_max)
        if self.n_scenes < 0:
            raise ValueError(f"data.n_scenes must be >= 0: {self.n_scenes}")
        if not 0 <= self.people_min <= self.people_max:
            raise ValueError(
                f"data.people range invalid: "
                f"[{self.people_min}, {self.people_max}]"
            )


@dataclasses.dataclass
class TrainSection:
    epochs: int = 10
    batch_size: int = 8
    lr_schedule: tuple = ((1, 1e-4),)
    optimizer: str = "adam"
    cpn_width: int = 16
    prn_width: int = 16
    coarse_resolution: tuple = (40, 40, 10)
    fine_resolution: tuple = (16, 16, 16)
    teacher_forcing_epochs: int = 10
    cpn_weight: float = 1.0
    prn_weight: float = 1.0

    def __post_init__(self):
        self.epochs = int(self.epochs)
        self.batch_size = int(self.batch_size)
        self.lr_schedule = tuple(
            (int(e), float(r)) for e, r in self.lr_schedule
        )
        self.coarse_resolution = tuple(int(v) for v in self.coarse_resolution)
        self.fine_resolution = tuple(int(v) for v in self.fine_resolution)
        if self.epochs < 1:
            raise ValueError(f"train.epochs must be >= 1: {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"train.batch_size must be >= 1: {self.batch_size}")
        if not self.lr_schedule or any(r <= 0 for _, r in self.lr_schedule):
            raise ValueError(
                f"train.lr_schedule rates must be > 0: {self.lr_schedule}"
            )
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(
                f"train.optimizer must be 'sgd' or 'adam': {self.optimizer!r}"
            )
        if min(self.cpn_width, self.prn_width) < 1:
            raise ValueError("train widths must be >= 1")


@dataclasses.dataclass
class EvalSection:
    ap_thresholds: tuple = (25.0, 50.0, 100.0, 150.0)
    recall_thresholds: tuple = (100.0, 200.0, 300.0, 500.0)
    align_root: bool = False
    pcp_alpha: float = 0.5

    def __post_init__(self):
        self.ap_thresholds = tuple(float(v) for v in self.ap_thresholds)
        self.recall_thresholds = tuple(
            float(v) for v in self.recall_thresholds
        )
        self.align_root = bool(self.align_root)
        self.pcp_alpha = float(self.pcp_alpha)
        for name, seq in (
            ("eval.ap_thresholds", self.ap_thresholds),
            ("eval.recall_thresholds", self.recall_thresholds),
        ):
            if not seq or not _ascending(seq):
                raise ValueError(f"{name} must strictly ascend: {seq}")
        if self.pcp_alpha <= 0:
            raise ValueError(f"eval.pcp_alpha must be > 0: {self.pcp_alpha}")


@dataclasses.dataclass
class AblateSection:
    views: tuple = (1, 3, 5)
    grids: tuple = ((48, 48, 12), (64, 64, 16), (80, 80, 20))

    def __post_init__(self):
        self.views = tuple(int(v) for v in self.views)
        self.grids = tuple(tuple(int(v) for v in g) for g in self.grids)
        if not self.views or min(self.views) < 1:
            raise ValueError(f"ablate.views must be counts >= 1: {self.views}")
        for g in self.grids:
            if len(g) != 3 or min(g) < 1:
                raise ValueError(f"ablate.grids entry invalid: {g}")


@dataclasses.dataclass
class ExperimentConfig:
    rig: str = ""
    mode: str = "analytic"
    seed: int = 0
    root_joint: int = 0
    space: SpaceConfig = dataclasses.field(default_factory=SpaceConfig)
    fine: FineConfig = dataclasses.field(default_factory=FineConfig)
    heatmap: HeatmapConfig = dataclasses.field(default_factory=HeatmapConfig)
    noise: NoiseConfig = dataclasses.field(default_factory=NoiseConfig)
    nms: NmsConfig = dataclasses.field(default_factory=NmsConfig)
    data: DataConfig = dataclasses.field(default_factory=DataConfig)
    train: TrainSection = dataclasses.field(default_factory=TrainSection)
    eval: EvalSection = dataclasses.field(default_factory=EvalSection)
    ablate: AblateSection = dataclasses.field(default_factory=AblateSection)

    def __post_init__(self):
        self.seed = int(self.seed)
        self.root_joint = int(self.root_joint)
        if self.mode not in ("analytic", "net"):
            raise ValueError(
                f"mode must be 'analytic' or 'net': {self.mode!r}"
            )
        if self.root_joint < 0:
            raise ValueError(f"root_joint must be >= 0: {self.root_joint}")

    def to_dict(self):
        return dataclasses.asdict(self)

    def save(self, path):
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
            f.write("\n")


_SECTIONS = {
    "space": SpaceConfig,
    "fine": FineConfig,
    "heatmap": HeatmapConfig,
    "noise": NoiseConfig,
    "nms": NmsConfig,
    "data": DataConfig,
    "train": TrainSection,
    "eval": EvalSection,
    "ablate": AblateSection,
}


def _build_section(cls, data, prefix):
    if not isinstance(data, dict):
        raise ValueError(f"config section '{prefix}' must be an object")
    valid = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - valid
    if unknown:
        raise ValueError(
            f"unknown config key '{prefix}.{sorted(unknown)[0]}' "
            f"(valid keys: {', '.join(sorted(valid))})"
        )
    try:
        return cls(**data)
    except (TypeError, ValueError) as e:
        raise ValueError(f"config section '{prefix}': {e}") from e


def config_from_dict(data):
    """Build an ExperimentConfig from a plain dict, strictly."""
    if not isinstance(data, dict):
        raise ValueError("config root must be a JSON object")
    top = {
        f.name for f in dataclasses.fields(ExperimentConfig)
    } - set(_SECTIONS)
    unknown = set(data) - top - set(_SECTIONS)
    if unknown:
        raise ValueError(
            f"unknown config key '{sorted(unknown)[0]}' (valid keys: "
            f"{', '.join(sorted(top | set(_SECTIONS)))})"
        )
    kwargs = {k: data[k] for k in top if k in data}
    for name, cls in _SECTIONS.items():
        if name in data:
            kwargs[name] = _build_section(cls, data[name], name)
    return ExperimentConfig(**kwargs)


def load_config(path):
    """Read and validate a config file; resolves the rig path against
    the config file's directory."""
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except OSError as e:
        raise ValueError(f"cannot read config {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ValueError(
            f"config {path} is not valid JSON (line {e.lineno}, "
            f"column {e.colno}): {e.msg}"
        ) from e
    cfg = config_from_dict(data)
    if cfg.rig and not os.path.isabs(cfg.rig):
        cfg.rig = os.path.normpath(
            os.path.join(os.path.dirname(os.path.abspath(path)), cfg.rig)
        )
    return cfg
