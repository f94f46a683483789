"""
Pydantic Schemas
Headers, split documents, run configuration, loss and metric reports, API payloads
"""
import hashlib
import json
import math
from datetime import datetime
from enum import Enum
from pathlib import Path
from typing import Annotated, Dict, List, Literal, Optional, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

PositiveSpacing = Annotated[float, Field(gt=0, allow_inf_nan=False)]
Fraction = Annotated[float, Field(gt=0, lt=1)]
GridSize = Tuple[Annotated[int, Field(ge=1)], Annotated[int, Field(ge=1)], Annotated[int, Field(ge=1)]]
SpacingTriple = Tuple[PositiveSpacing, PositiveSpacing, PositiveSpacing]

NUM_CLASSES = 3
BACKGROUND, BRAIN, VESSEL = 0, 1, 2
CLASS_NAMES = {BACKGROUND: "background", BRAIN: "brain", VESSEL: "vessel"}


# ==================== Enumerations ====================

class DomainTag(str, Enum):
    """Imaging domain of a sample; the flag value is what the encoder receives"""
    SOURCE = "source"
    TARGET = "target"

    @property
    def flag(self) -> int:
        return 0 if self is DomainTag.SOURCE else 1

    @classmethod
    def from_flag(cls, d: int) -> "DomainTag":
        return cls.SOURCE if int(d) == 0 else cls.TARGET

    @property
    def opposite(self) -> "DomainTag":
        return DomainTag.TARGET if self is DomainTag.SOURCE else DomainTag.SOURCE


class Split(str, Enum):
    TRAIN = "train"
    VAL = "val"
    TEST = "test"


class Polarity(str, Enum):
    BRIGHT = "bright_vessels"
    DARK = "dark_vessels"


class Scenario(str, Enum):
    NARROW_GAP = "narrow_gap"
    MEDIUM_GAP = "medium_gap"
    WIDE_GAP = "wide_gap"


class RunStatus(str, Enum):
    PENDING = "pending"
    RUNNING = "running"
    COMPLETED = "completed"
    DIVERGED = "diverged"


# ==================== Volume Schemas ====================

class VolumeHeader(BaseModel):
    """
    Sidecar header of a stored volume or mask.
    The grid must equal the payload shape exactly; spacing is mm per voxel.
    """
    model_config = ConfigDict(frozen=True)

    grid_size: GridSize
    spacing_mm: SpacingTriple
    domain_tag: DomainTag
    subject_id: str = Field(..., min_length=1)
    dtype: Literal["float32", "uint8"] = "float32"

    def with_updates(self, **changes) -> "VolumeHeader":
        return self.model_copy(update=changes)


# ==================== Split / Index Schemas ====================

class DomainSplit(BaseModel):
    """Subject ids of one domain per split"""
    train: List[str] = []
    val: List[str] = []
    test: List[str] = []

    def subjects(self, split: Split) -> List[str]:
        return list(getattr(self, split.value))


class LabeledSlice(BaseModel):
    """A target annotation: one axial slice, or the whole volume when slice is None"""
    subject: str
    slice: Optional[Annotated[int, Field(ge=0)]] = None


class SplitSpec(BaseModel):
    """
    Split document consumed by build_index.
    `labeled` designates the target training annotations forming T_L.
    """
    source: DomainSplit = DomainSplit()
    target: DomainSplit = DomainSplit()
    labeled: List[LabeledSlice] = []

    def domain(self, tag: DomainTag) -> DomainSplit:
        return self.source if tag is DomainTag.SOURCE else self.target


class IndexEntry(BaseModel):
    """One volume of the dataset index"""
    model_config = ConfigDict(frozen=True)

    subject_id: str
    domain_tag: DomainTag
    split: Split
    volume_path: Path
    mask_path: Optional[Path] = None
    labeled: bool = False
    depth: int = Field(..., ge=1)
    # Annotated axial indices; every slice for fully annotated volumes
    labeled_slices: Tuple[int, ...] = ()

    @model_validator(mode="after")
    def _labeled_needs_mask(self):
        if self.labeled and self.mask_path is None:
            raise ValueError(f"labeled entry {self.subject_id} has no mask path")
        return self


class SplitCounts(BaseModel):
    """N labeled source volumes, M unlabeled target volumes, m labeled target slices"""
    N: int
    M: int
    m: int


class DatasetIndex(BaseModel):
    """
    Volumes of S, T_U and T_L (plus validation and test volumes).
    Counts refer to the training split.
    """
    root: Path
    entries: List[IndexEntry] = []

    @model_validator(mode="after")
    def _check_partition(self):
        for entry in self.entries:
            if entry.domain_tag is DomainTag.SOURCE and not entry.labeled:
                raise ValueError(f"source entry {entry.subject_id} is not labeled")
            if any(k >= entry.depth for k in entry.labeled_slices):
                raise ValueError(f"labeled slice outside the volume of {entry.subject_id}")
        return self

    def select(
        self,
        split: Optional[Split] = None,
        domain: Optional[DomainTag] = None,
        labeled: Optional[bool] = None,
    ) -> List[IndexEntry]:
        return [
            e for e in self.entries
            if (split is None or e.split is split)
            and (domain is None or e.domain_tag is domain)
            and (labeled is None or e.labeled is labeled)
        ]

    def counts(self, split: Split = Split.TRAIN) -> SplitCounts:
        source = self.select(split, DomainTag.SOURCE)
        target = self.select(split, DomainTag.TARGET)
        return SplitCounts(
            N=len(source),
            M=sum(1 for e in target if not e.labeled),
            m=sum(len(e.labeled_slices) for e in target if e.labeled),
        )

    @property
    def N(self) -> int:
        return self.counts().N

    @property
    def M(self) -> int:
        return self.counts().M

    @property
    def m(self) -> int:
        return self.counts().m

    def subjects(self, split: Split, domain: Optional[DomainTag] = None) -> set:
        return {e.subject_id for e in self.select(split, domain)}


# ==================== Phantom Schemas ====================

class DomainSpec(BaseModel):
    """Appearance and geometry of one synthetic imaging domain"""
    model_config = ConfigDict(frozen=True)

    polarity: Polarity
    tube_count_range: Tuple[Annotated[int, Field(ge=1)], Annotated[int, Field(ge=1)]]
    radius_range_vox: Tuple[Annotated[float, Field(ge=1)], Annotated[float, Field(ge=1)]]
    tortuosity: float = Field(0.5, ge=0)
    noise_sigma: float = Field(0.05, ge=0)
    contrast: float = Field(0.8, gt=0, le=1)
    spacing_mm: SpacingTriple = (1.0, 1.0, 1.0)
    grid: GridSize = (64, 64, 32)
    brain_axes_frac: Tuple[Fraction, Fraction, Fraction] = (0.85, 0.85, 0.85)
    tissue_level: float = Field(0.5, gt=0, lt=1)

    @field_validator("tube_count_range", "radius_range_vox")
    @classmethod
    def _ordered(cls, v):
        if v[0] > v[1]:
            raise ValueError("range lower bound exceeds upper bound")
        return v


# ==================== Run Configuration Schemas ====================

class NetConfig(BaseModel):
    """Network sizes (desk-scale defaults)"""
    model_config = ConfigDict(extra="forbid")

    image_size: int = Field(64, ge=8)
    channels: int = Field(3, ge=1)
    z_dim: int = Field(64, ge=1)
    w_dim: int = Field(64, ge=1)
    n_mlp: int = Field(4, ge=1)
    base_channels: int = Field(64, ge=4)
    min_channels: int = Field(16, ge=4)
    lr_mlp: float = Field(0.01, gt=0)
    lsb_hidden: int = Field(128, ge=4)
    encoder_channels: int = Field(32, ge=4)
    domain_embed_dim: int = Field(4, ge=1)
    skip_min_res: int = Field(8, ge=4)
    perceptual_channels: int = Field(16, ge=2)

    @field_validator("image_size")
    @classmethod
    def _power_of_two(cls, v):
        if v & (v - 1):
            raise ValueError("image_size must be a power of two")
        return v

    @field_validator("channels")
    @classmethod
    def _odd(cls, v):
        if v % 2 == 0:
            raise ValueError("channel count must be odd (center slice plus symmetric neighbours)")
        return v

    @property
    def log_size(self) -> int:
        return int(math.log2(self.image_size))

    @property
    def num_ws(self) -> int:
        # one style for the 4x4 conv, two per doubling, one shared by each output layer
        return self.log_size * 2 - 2

    def channels_at(self, res: int) -> int:
        return max(self.min_channels, min(self.base_channels, self.base_channels * 32 // res))


class AblationFlags(BaseModel):
    """Architectural switches: residual skips, domain-specific BN, balanced sampling, inversion"""
    model_config = ConfigDict(extra="forbid")

    residuals: bool = True
    dsbn: bool = True
    bds: bool = True
    inversion: bool = True


class LossWeights(BaseModel):
    model_config = ConfigDict(extra="forbid")

    dice: float = Field(1.0, ge=0)
    ce: float = Field(1.0, ge=0)
    mse: float = Field(1.0, ge=0)
    perceptual: float = Field(1.0, ge=0)
    cycle: float = Field(1.0, ge=0)
    pl: float = Field(2.0, ge=0)
    r1_gamma: float = Field(10.0, ge=0)


class TrainConfig(BaseModel):
    """Full run configuration; every default can be overridden from the JSON config"""
    model_config = ConfigDict(extra="forbid")

    iters_phase1: int = Field(6000, ge=0)
    iters_pretrain: int = Field(800, ge=0)
    iters_phase2: int = Field(1500, ge=0)
    batch_size: int = Field(4, ge=1)

    lr_g: float = Field(2e-3, gt=0)
    lr_d: float = Field(2e-3, gt=0)
    lr_e: float = Field(1e-4, gt=0)
    lr_lsb: float = Field(1e-4, gt=0)
    betas_phase1: Tuple[float, float] = (0.0, 0.99)
    betas_phase2: Tuple[float, float] = (0.9, 0.999)

    r1_every: int = Field(16, ge=1)
    pl_every: int = Field(8, ge=1)
    pl_decay: float = Field(0.99, gt=0, lt=1)
    pl_batch_shrink: int = Field(2, ge=1)

    val_every: int = Field(200, ge=1)
    checkpoint_every: int = Field(200, ge=1)
    val_max_volumes: Optional[int] = Field(None, ge=1)

    seed: int = 7
    cycle: bool = True
    invert_domain: DomainTag = DomainTag.TARGET
    cldice_mode: Literal["3d", "2d"] = "3d"

    net: NetConfig = NetConfig()
    ablation: AblationFlags = AblationFlags()
    weights: LossWeights = LossWeights()

    def canonical_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode("utf-8")).hexdigest()

    def inverts(self, domain: DomainTag) -> bool:
        return self.ablation.inversion and domain is self.invert_domain


# ==================== Loss / Metric Schemas ====================

class LossReport(BaseModel):
    """Named loss scalars of one iteration; absent terms stay None"""
    phase: str
    iteration: int
    adv_g: Optional[float] = None
    adv_d: Optional[float] = None
    r1: Optional[float] = None
    pl: Optional[float] = None
    dice: Optional[float] = None
    ce: Optional[float] = None
    mse: Optional[float] = None
    perceptual: Optional[float] = None
    cycle: Optional[float] = None
    seg_source: Optional[float] = None
    seg_target: Optional[float] = None
    total: Optional[float] = None

    @field_validator(
        "adv_g", "adv_d", "r1", "pl", "dice", "ce", "mse", "perceptual",
        "cycle", "seg_source", "seg_target", "total",
    )
    @classmethod
    def _finite(cls, v):
        if v is not None and not math.isfinite(v):
            raise ValueError("loss value is not finite")
        return v

    def losses(self) -> Dict[str, float]:
        return {k: v for k, v in self.model_dump(exclude={"phase", "iteration"}).items() if v is not None}


class ClassMetrics(BaseModel):
    dice: float = Field(..., ge=0, le=1)
    precision: float = Field(..., ge=0, le=1)
    recall: float = Field(..., ge=0, le=1)


class VolumeMetrics(BaseModel):
    """
    Per-volume scores. assd_mm is None when either vessel mask is empty.

    head_agreement is the vessel Dice between the hard labels of the reconstruction
    and translation heads; None for source inputs, which have no translation head.
    """
    subject_id: str
    brain: ClassMetrics
    vessel: ClassMetrics
    cldice: float = Field(..., ge=0, le=1)
    assd_mm: Optional[float] = Field(None, ge=0)
    head_agreement: Optional[float] = Field(None, ge=0, le=1)

    def flat(self) -> Dict[str, Optional[float]]:
        return {
            "brain_dice": self.brain.dice,
            "brain_precision": self.brain.precision,
            "brain_recall": self.brain.recall,
            "vessel_dice": self.vessel.dice,
            "vessel_precision": self.vessel.precision,
            "vessel_recall": self.vessel.recall,
            "vessel_cldice": self.cldice,
            "vessel_assd_mm": self.assd_mm,
            "vessel_head_agreement": self.head_agreement,
        }


class MetricSummary(BaseModel):
    mean: float
    std: float
    count: int


class MetricsReport(BaseModel):
    """Per-volume table and aggregate mean ± population std"""
    label: Optional[str] = None
    volumes: List[VolumeMetrics] = []
    aggregate: Dict[str, MetricSummary] = {}
    assd_missing: int = 0


class CheckpointRecord(BaseModel):
    """A validated checkpoint: vessel Dice on the source and target validation sets"""
    phase: str
    iteration: int
    path: Optional[str] = None
    source_dice: float
    target_dice: Optional[float] = None

    @property
    def score(self) -> float:
        return 0.5 * (self.source_dice + self.target_dice)

    def is_finite(self) -> bool:
        """Both domains scored with finite values; source-only records never qualify"""
        return self.target_dice is not None and math.isfinite(self.source_dice) and math.isfinite(self.target_dice)


# ==================== Experiment Schemas ====================

class SweepKind(str, Enum):
    M = "m"
    N = "N"
    ABLATION = "ablation"
    BASELINE = "baseline"
    NONE = "none"


# reference models the full method is compared against
BASELINES = ("full_method", "pretrain_only", "target_only")


SweepValue = Union[int, str, Dict[str, bool]]


class SweepSpec(BaseModel):
    kind: SweepKind = SweepKind.NONE
    values: List[SweepValue] = []


class ExperimentSpec(BaseModel):
    """Declarative experiment: one train+eval run per sweep point per seed"""
    model_config = ConfigDict(extra="forbid")

    name: str = Field(..., min_length=1)
    scenario: Scenario = Scenario.WIDE_GAP
    sweep: SweepSpec = SweepSpec()
    base: TrainConfig = TrainConfig()
    seeds: List[int] = [7, 17, 27]
    data_seed: int = 0
    n_source: int = Field(35, ge=0)
    n_target: int = Field(20, ge=1)
    n_val: int = Field(4, ge=1)
    n_test: int = Field(4, ge=1)
    n_labeled: int = Field(3, ge=0)
    grid: Optional[GridSize] = None

    @model_validator(mode="after")
    def _valid_sweep(self):
        kind, values = self.sweep.kind, self.sweep.values
        if kind is SweepKind.NONE:
            return self
        if not values:
            raise ValueError("sweep has no values")
        for value in values:
            if kind is SweepKind.M:
                if value == "full":
                    continue
                if not isinstance(value, int) or not 0 <= value <= self.n_target:
                    raise ValueError(f"m sweep value {value!r} outside [0, {self.n_target}] or 'full'")
            elif kind is SweepKind.N:
                if not isinstance(value, int) or not 0 <= value <= self.n_source:
                    raise ValueError(f"N sweep value {value!r} outside [0, {self.n_source}]")
            elif kind is SweepKind.ABLATION:
                if not isinstance(value, dict) or not set(value) <= set(AblationFlags.model_fields):
                    raise ValueError(f"ablation sweep value {value!r} names unknown flags")
            elif kind is SweepKind.BASELINE:
                if value not in BASELINES:
                    raise ValueError(f"baseline sweep value {value!r} not one of {', '.join(BASELINES)}")
        return self


class SweepPointResult(BaseModel):
    label: str
    kind: SweepKind
    value: SweepValue
    seed: int
    rundir: str
    status: RunStatus
    target_vessel_dice: Optional[float] = None
    head_agreement: Optional[float] = None
    report: Optional[MetricsReport] = None


# ==================== Run Registry / API Schemas ====================

class RunResponse(BaseModel):
    """Schema for a run of the experiment ledger"""
    id: int
    experiment: str
    scenario: str
    sweep_kind: str
    sweep_value: str
    seed: int
    rundir: str
    status: RunStatus
    config_hash: Optional[str] = None
    target_vessel_dice: Optional[float] = None
    source_vessel_dice: Optional[float] = None
    created_at: datetime
    updated_at: Optional[datetime] = None

    model_config = ConfigDict(from_attributes=True)


class PredictRequest(BaseModel):
    """Schema for single-volume inference"""
    checkpoint_path: Path
    volume_path: Path
    output_path: Path
    domain: DomainTag = DomainTag.TARGET
    invert: bool = False


class PredictResponse(BaseModel):
    output_path: str
    grid_size: GridSize
    brain_voxels: int
    vessel_voxels: int


class ErrorResponse(BaseModel):
    """Body of every error the service returns"""
    error: str
    detail: Union[str, List[dict]]
    status_code: int
    timestamp: datetime = Field(default_factory=datetime.utcnow)
