"""
Two-Phase Training
Adversarial latent-space learning, source pre-training, label-preserving adaptation, model selection
"""
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from vesseladapt.config import get_settings, resolve_run_config
from vesseladapt.exceptions import (
    ConfigMismatch,
    DivergenceDetected,
    EmptyStratum,
    NoValidRecords,
    ResolutionMismatch,
)
from vesseladapt.logging_config import close_run_log, open_run_log, truncate_run_log
from vesseladapt.nets import ModelBundle, build_models, load_checkpoint, restore_models, save_checkpoint
from vesseladapt.nets.bundle import restore_rng, rng_state
from vesseladapt.schemas import (
    VESSEL,
    CheckpointRecord,
    DatasetIndex,
    DomainTag,
    LossReport,
    RunStatus,
    Split,
    SplitSpec,
    TrainConfig,
)
from vesseladapt.services.infer_eval import dice, load_pair, predict
from vesseladapt.services.losses import (
    PathLengthState,
    PerceptualExtractor,
    adv_nonsat,
    mse_loss,
    path_length,
    perceptual_distance,
    r1_penalty,
    seg_loss,
)
from vesseladapt.services.preprocess import extract_slices
from vesseladapt.services.volume_io import build_index, load_split_spec, save_split_spec

logger = logging.getLogger(__name__)

PHASES = ["phase1", "pretrain", "phase2", "done"]
SOURCE, TARGET_LABELED, TARGET_UNLABELED = "source", "target_labeled", "target_unlabeled"
STRATA = (SOURCE, TARGET_LABELED, TARGET_UNLABELED)

CHECKPOINT_DIR = "checkpoints"
BEST_NAME = "best.pt"
LAST_NAME = "last.pt"
RECORDS_NAME = "records.json"
DIVERGED_NAME = "diverged.json"
RESOLVED_CONFIG_NAME = "config.resolved.json"
SPLIT_NAME = "split.json"


# ==================== Data ====================

@dataclass
class Batch:
    images: torch.Tensor
    masks: List[Optional[np.ndarray]]
    domains: List[DomainTag]
    strata: List[str]
    ids: List[str]

    def group(self, domain: DomainTag) -> List[int]:
        return [i for i, d in enumerate(self.domains) if d is domain]


class SliceBank:
    """
    2.5D training samples by stratum: S (labeled source), T_L (annotated target slices)
    and T_U (all other target training slices). Counts every sample handed out.
    """

    def __init__(self, channels: int, image_size: int):
        self.channels = channels
        self.image_size = image_size
        self.images: Dict[str, List[np.ndarray]] = {s: [] for s in STRATA}
        self.masks: Dict[str, List[Optional[np.ndarray]]] = {s: [] for s in STRATA}
        self.ids: Dict[str, List[str]] = {s: [] for s in STRATA}
        self.access: Dict[str, int] = {s: 0 for s in STRATA}

    @classmethod
    def from_index(cls, index: DatasetIndex, cfg: TrainConfig) -> "SliceBank":
        bank = cls(cfg.net.channels, cfg.net.image_size)
        for entry in index.select(Split.TRAIN):
            volume, mask = load_pair(entry, cfg)
            if volume.header.grid_size[0] != bank.image_size or volume.header.grid_size[1] != bank.image_size:
                raise ResolutionMismatch(
                    f"{entry.subject_id}: in-plane grid {volume.header.grid_size[:2]} "
                    f"differs from the network size {bank.image_size}"
                )
            annotated = set(entry.labeled_slices) if entry.labeled else set()
            for sample in extract_slices(volume, mask if annotated else None, bank.channels,
                                         labeled_slices=sorted(annotated)):
                if entry.domain_tag is DomainTag.SOURCE:
                    stratum = SOURCE
                else:
                    stratum = TARGET_LABELED if sample.labeled else TARGET_UNLABELED
                bank.add(stratum, sample.image, sample.mask, f"{entry.subject_id}:{sample.slice_index}")
        logger.info("Slice bank: " + ", ".join(f"{s}={bank.size(s)}" for s in STRATA))
        return bank

    def add(self, stratum: str, image: np.ndarray, mask: Optional[np.ndarray], sample_id: str) -> None:
        self.images[stratum].append(image.astype(np.float32))
        self.masks[stratum].append(mask)
        self.ids[stratum].append(sample_id)

    def size(self, stratum: str) -> int:
        return len(self.images[stratum])

    def domain_of(self, stratum: str) -> DomainTag:
        return DomainTag.SOURCE if stratum == SOURCE else DomainTag.TARGET

    def draw(self, picks: Sequence[Tuple[str, int]]) -> Batch:
        for stratum, _ in picks:
            self.access[stratum] += 1
        return Batch(
            images=torch.from_numpy(np.stack([self.images[s][i] for s, i in picks])),
            masks=[self.masks[s][i] for s, i in picks],
            domains=[self.domain_of(s) for s, _ in picks],
            strata=[s for s, _ in picks],
            ids=[self.ids[s][i] for s, i in picks],
        )


def sample_batch(bank: SliceBank, bds: bool, rng: np.random.Generator, batch_size: int = 4,
                 strata: Sequence[str] = STRATA) -> Batch:
    """
    Balanced sampling: half source, a quarter T_L, the rest T_U (2/1/1 for four),
    each stratum drawn with replacement. Without `bds`, uniform over all samples of `strata`.
    """
    if bds:
        n_source = batch_size // 2
        n_labeled = max(1, batch_size // 4)
        plan = [(SOURCE, n_source), (TARGET_LABELED, n_labeled),
                (TARGET_UNLABELED, batch_size - n_source - n_labeled)]
        picks = []
        for stratum, count in plan:
            if count and bank.size(stratum) == 0:
                raise EmptyStratum(f"balanced sampling needs {stratum} samples, none available")
            picks += [(stratum, int(i)) for i in rng.integers(0, bank.size(stratum), size=count)]
        return bank.draw(picks)

    pool = [(s, i) for s in strata for i in range(bank.size(s))]
    if not pool:
        raise EmptyStratum("no training samples available")
    chosen = rng.integers(0, len(pool), size=batch_size)
    return bank.draw([pool[int(i)] for i in chosen])


# ==================== Model selection ====================

def select_checkpoint(records: Sequence[CheckpointRecord]) -> CheckpointRecord:
    """Highest mean of source and target validation vessel Dice; ties go to the later record"""
    valid = [r for r in records if r.is_finite()]
    if not valid:
        raise NoValidRecords("no checkpoint record with finite validation metrics")
    best = valid[0]
    for record in valid[1:]:
        if record.score >= best.score:
            best = record
    return best


@torch.no_grad()
def validate(bundle: ModelBundle, val_sets: Dict[DomainTag, list], channels: int) -> Dict[DomainTag, float]:
    """Mean vessel Dice per domain on validation volumes (0.0 for a domain without any)"""
    was_training = bundle.training
    bundle.eval()
    scores = {}
    for domain, pairs in val_sets.items():
        values = [dice(predict(bundle, volume, domain, channels)[0], mask, VESSEL) for volume, mask in pairs]
        scores[domain] = float(np.mean(values)) if values else 0.0
    bundle.train(was_training)
    return scores


# ==================== Phase steps ====================

def _check_finite(losses: Dict[str, torch.Tensor], where: str) -> None:
    bad = [name for name, value in losses.items() if not torch.isfinite(value).all()]
    if bad:
        raise DivergenceDetected(f"non-finite {', '.join(bad)} at {where}")


def phase1_step(
    bundle: ModelBundle,
    opt_g: torch.optim.Optimizer,
    opt_d: torch.optim.Optimizer,
    real: torch.Tensor,
    cfg: TrainConfig,
    pl_state: PathLengthState,
    step: int,
) -> Tuple[Dict[str, float], PathLengthState]:
    """One D update and one G update of the adversarial phase, with lazy R1 / path-length terms"""
    batch = real.shape[0]
    z_dim = cfg.net.z_dim
    values: Dict[str, float] = {}

    bundle.G.requires_grad_(False)
    bundle.D.requires_grad_(True)
    with torch.no_grad():
        fake, _ = bundle.generate(bundle.map_latent(torch.randn(batch, z_dim)), randomize_noise=True)
    loss_d = adv_nonsat(bundle.discriminate(fake), bundle.discriminate(real), side="D")
    _check_finite({"adv_d": loss_d}, f"phase1 iteration {step}")
    opt_d.zero_grad(set_to_none=True)
    loss_d.backward()
    opt_d.step()
    values["adv_d"] = float(loss_d)

    if step % cfg.r1_every == 0:
        r1 = r1_penalty(bundle.discriminate, real, cfg.weights.r1_gamma)
        _check_finite({"r1": r1}, f"phase1 iteration {step}")
        opt_d.zero_grad(set_to_none=True)
        (r1 * cfg.r1_every).backward()
        opt_d.step()
        values["r1"] = float(r1)

    bundle.G.requires_grad_(True)
    bundle.D.requires_grad_(False)
    fake, _ = bundle.generate(bundle.map_latent(torch.randn(batch, z_dim)), randomize_noise=True)
    loss_g = adv_nonsat(bundle.discriminate(fake), side="G")
    _check_finite({"adv_g": loss_g}, f"phase1 iteration {step}")
    opt_g.zero_grad(set_to_none=True)
    loss_g.backward()
    opt_g.step()
    values["adv_g"] = float(loss_g)

    if step % cfg.pl_every == 0:
        pl_batch = max(1, batch // cfg.pl_batch_shrink)
        w = bundle.map_latent(torch.randn(pl_batch, z_dim))
        pl, pl_state, _ = path_length(lambda codes: bundle.generate(codes, randomize_noise=True)[0], w, pl_state)
        _check_finite({"pl": pl}, f"phase1 iteration {step}")
        opt_g.zero_grad(set_to_none=True)
        (pl * cfg.weights.pl * cfg.pl_every).backward()
        opt_g.step()
        values["pl"] = float(pl)

    bundle.D.requires_grad_(True)
    return values, pl_state


@dataclass
class Phase2Terms:
    """Loss tensors of one adaptation step, kept apart for routing checks and logging"""
    recon: List[torch.Tensor] = field(default_factory=list)
    mse: List[torch.Tensor] = field(default_factory=list)
    perceptual: List[torch.Tensor] = field(default_factory=list)
    seg_source: List[torch.Tensor] = field(default_factory=list)
    seg_target: List[torch.Tensor] = field(default_factory=list)
    cycle: List[torch.Tensor] = field(default_factory=list)

    @staticmethod
    def _sum(terms, like):
        return torch.stack(terms).sum() if terms else like.new_zeros(())

    def total(self, like: torch.Tensor, w_cycle: float) -> torch.Tensor:
        return (self._sum(self.recon, like) + self._sum(self.seg_source, like)
                + self._sum(self.seg_target, like) + w_cycle * self._sum(self.cycle, like))

    def report(self, phase: str, iteration: int, total: torch.Tensor, like: torch.Tensor) -> LossReport:
        def value(terms):
            return float(self._sum(terms, like)) if terms else None

        return LossReport(
            phase=phase,
            iteration=iteration,
            mse=value(self.mse),
            perceptual=value(self.perceptual),
            seg_source=value(self.seg_source),
            seg_target=value(self.seg_target),
            cycle=value(self.cycle),
            total=float(total),
        )


def _recon(x, x_hat, perceptual, cfg: TrainConfig, terms: Phase2Terms, into: List[torch.Tensor]) -> None:
    mse = mse_loss(x, x_hat)
    perc = perceptual_distance(x, x_hat, perceptual)
    terms.mse.append(mse)
    terms.perceptual.append(perc)
    into.append(cfg.weights.mse * mse + cfg.weights.perceptual * perc)


def cycle_step(bundle: ModelBundle, x: torch.Tensor, d_own: int, perceptual, cfg: TrainConfig,
               terms: Optional[Phase2Terms] = None) -> torch.Tensor:
    """
    x → opposite domain → back to d_own; reconstruction loss of the round trip.
    The first translation is computed without gradient, so only the second pass trains.
    """
    with torch.no_grad():
        w, residuals = bundle.encode(x, 1 - d_own)
        x_other, _ = bundle.generate(w, residuals)
    w, residuals = bundle.encode(x_other, d_own)
    x_back, _ = bundle.generate(w, residuals)
    terms = terms if terms is not None else Phase2Terms()
    _recon(x, x_back, perceptual, cfg, terms, terms.cycle)
    return terms.cycle[-1]


def _onehot(masks: Sequence[np.ndarray]) -> torch.Tensor:
    return torch.from_numpy(np.stack(masks)).float()


def phase2_terms(
    bundle: ModelBundle,
    batch: Batch,
    cfg: TrainConfig,
    perceptual,
    translate: bool = True,
) -> Phase2Terms:
    """
    Loss terms of one adaptation step.

    Source samples: reconstruction L_R plus L_S against y^s for the reconstruction and
    the translation. Target samples: reconstruction L_R, and L_S on both outputs for
    annotated slices only. With `translate` off (pre-training) only reconstruction paths run.
    """
    terms = Phase2Terms()
    w_dice, w_ce = cfg.weights.dice, cfg.weights.ce
    for domain in (DomainTag.SOURCE, DomainTag.TARGET):
        rows = batch.group(domain)
        if not rows:
            continue
        x = batch.images[rows]
        own = domain.flag
        labeled = [j for j, r in enumerate(rows) if batch.masks[r] is not None]
        y = _onehot([batch.masks[rows[j]] for j in labeled]) if labeled else None

        w, residuals = bundle.encode(x, own)
        x_rec, features = bundle.generate(w, residuals)
        _recon(x, x_rec, perceptual, cfg, terms, terms.recon)
        seg_terms = terms.seg_source if domain is DomainTag.SOURCE else terms.seg_target
        if labeled:
            logits = bundle.label_branch(features)
            seg_terms.append(seg_loss(logits[labeled], y, w_dice, w_ce))

        if not translate:
            continue
        if labeled:
            _, logits_trans = bundle.translate(x, 1 - own)
            seg_terms.append(seg_loss(logits_trans[labeled], y, w_dice, w_ce))
        if cfg.cycle:
            cycle_step(bundle, x, own, perceptual, cfg, terms)
    return terms


# ==================== Trainer ====================

@dataclass
class TrainResult:
    rundir: Path
    status: RunStatus
    best: Optional[CheckpointRecord]
    records: List[CheckpointRecord]
    interrupted: bool = False


class Trainer:
    """
    Runs phase1 → pretrain → phase2 over a SliceBank and owns all mutable training state.

    The run directory receives log.jsonl, checkpoints/{best,last}.pt, records.json and,
    on divergence, diverged.json.
    """

    def __init__(
        self,
        cfg: TrainConfig,
        bank: SliceBank,
        rundir: Path,
        val_sets: Optional[Dict[DomainTag, list]] = None,
        bundle: Optional[ModelBundle] = None,
    ):
        self.cfg = cfg
        self.bank = bank
        self.rundir = Path(rundir)
        self.val_sets = val_sets or {}
        torch.manual_seed(cfg.seed)
        self.bundle = bundle or build_models(cfg.net, cfg.ablation, cfg.seed)
        self.bundle.train()
        self.rng = np.random.default_rng(cfg.seed)
        self.perceptual = PerceptualExtractor(cfg.net.channels, cfg.net.perceptual_channels)
        self.pl_state = PathLengthState(decay=cfg.pl_decay)
        self.opt_g = torch.optim.Adam(self.bundle.G.parameters(), lr=cfg.lr_g, betas=cfg.betas_phase1)
        self.opt_d = torch.optim.Adam(self.bundle.D.parameters(), lr=cfg.lr_d, betas=cfg.betas_phase1)
        self.opt_e = torch.optim.Adam(self.bundle.E.parameters(), lr=cfg.lr_e, betas=cfg.betas_phase2)
        self.opt_lsb = torch.optim.Adam(self.bundle.G_lsb.parameters(), lr=cfg.lr_lsb, betas=cfg.betas_phase2)
        self.phase = PHASES[0]
        self.iteration = 0
        self.w_avg_ready = False
        self.records: List[CheckpointRecord] = []
        self.run_log = None
        self.steps_taken = 0
        self.last_batch_ids: List[str] = []

    @property
    def checkpoint_dir(self) -> Path:
        return self.rundir / CHECKPOINT_DIR

    def phase_length(self, phase: str) -> int:
        if phase == "pretrain" and self.bank.size(SOURCE) == 0:
            return 0
        return {"phase1": self.cfg.iters_phase1, "pretrain": self.cfg.iters_pretrain,
                "phase2": self.cfg.iters_phase2}.get(phase, 0)

    # ===== State =====

    def state(self) -> dict:
        return {
            "config": self.cfg.model_dump(mode="json"),
            "config_hash": self.cfg.config_hash(),
            "phase": self.phase,
            "iteration": self.iteration,
            "rng": rng_state(self.rng),
            "optimizers": {
                "G": self.opt_g.state_dict(),
                "D": self.opt_d.state_dict(),
                "E": self.opt_e.state_dict(),
                "G_lsb": self.opt_lsb.state_dict(),
            },
            "pl_state": self.pl_state.as_dict(),
            "w_avg_ready": self.w_avg_ready,
            "records": [r.model_dump() for r in self.records],
            "bank_access": dict(self.bank.access),
        }

    def load_state(self, payload: dict) -> None:
        restore_models(self.bundle, payload)
        self.phase = payload["phase"]
        self.iteration = int(payload["iteration"])
        restore_rng(payload["rng"], self.rng)
        self.opt_g.load_state_dict(payload["optimizers"]["G"])
        self.opt_d.load_state_dict(payload["optimizers"]["D"])
        self.opt_e.load_state_dict(payload["optimizers"]["E"])
        self.opt_lsb.load_state_dict(payload["optimizers"]["G_lsb"])
        self.pl_state = PathLengthState(**payload["pl_state"])
        self.w_avg_ready = bool(payload.get("w_avg_ready", False))
        self.records = [CheckpointRecord(**r) for r in payload.get("records", [])]
        self.bank.access.update(payload.get("bank_access", {}))

    def save(self, name: str = LAST_NAME) -> Path:
        return save_checkpoint(self.checkpoint_dir / name, self.bundle, self.state())

    def write_records(self) -> None:
        path = self.rundir / RECORDS_NAME
        path.write_text(json.dumps([r.model_dump() for r in self.records], indent=2) + "\n", encoding="utf-8")

    # ===== Logging =====

    def log(self, report: LossReport) -> None:
        if self.run_log is not None:
            self.run_log.info("loss", extra=report.model_dump(exclude_none=True))

    def log_event(self, event: str, **fields) -> None:
        if self.run_log is not None:
            self.run_log.info(event, extra={"event": event, **fields})

    # ===== Phases =====

    def _enter_adaptation(self) -> None:
        self.bundle.freeze_generator()
        if not self.w_avg_ready:
            self.bundle.init_average_latent(seed=self.cfg.seed)
            self.w_avg_ready = True

    def _step_phase1(self) -> Dict[str, float]:
        batch = sample_batch(self.bank, False, self.rng, self.cfg.batch_size)
        self.last_batch_ids = batch.ids
        self.bundle.unfreeze_generator()
        values, self.pl_state = phase1_step(
            self.bundle, self.opt_g, self.opt_d, batch.images, self.cfg, self.pl_state, self.iteration
        )
        return values

    def _step_adaptation(self, translate: bool) -> LossReport:
        if translate:
            bds = self.cfg.ablation.bds
            batch = sample_batch(self.bank, bds, self.rng, self.cfg.batch_size)
        else:
            batch = sample_batch(self.bank, False, self.rng, self.cfg.batch_size, strata=(SOURCE,))
        self.last_batch_ids = batch.ids

        terms = phase2_terms(self.bundle, batch, self.cfg, self.perceptual, translate=translate)
        like = batch.images.new_zeros(())
        total = terms.total(like, self.cfg.weights.cycle)
        _check_finite({"total": total}, f"{self.phase} iteration {self.iteration}")
        self.opt_e.zero_grad(set_to_none=True)
        self.opt_lsb.zero_grad(set_to_none=True)
        total.backward()
        self.opt_e.step()
        self.opt_lsb.step()
        return terms.report(self.phase, self.iteration, total, like)

    def best_record(self) -> Optional[CheckpointRecord]:
        """Best adaptation-phase record; pre-training records are kept for the log only"""
        candidates = [r for r in self.records if r.phase == "phase2" and r.is_finite()]
        return select_checkpoint(candidates) if candidates else None

    def run_validation(self) -> CheckpointRecord:
        if self.phase == "pretrain":
            # pre-training never reads target data
            val_sets = {d: pairs for d, pairs in self.val_sets.items() if d is DomainTag.SOURCE}
        else:
            val_sets = self.val_sets
        scores = validate(self.bundle, val_sets, self.cfg.net.channels)
        record = CheckpointRecord(
            phase=self.phase,
            iteration=self.iteration,
            path=None,
            source_dice=scores.get(DomainTag.SOURCE, 0.0),
            target_dice=None if self.phase == "pretrain" else scores.get(DomainTag.TARGET, 0.0),
        )
        best = self.best_record()
        if record.phase == "phase2" and record.is_finite() and (best is None or record.score >= best.score):
            record.path = str(Path(CHECKPOINT_DIR) / BEST_NAME)
            self.records.append(record)
            self.save(BEST_NAME)
        else:
            self.records.append(record)
        self.write_records()
        self.log_event("validation", phase=self.phase, iteration=self.iteration - 1,
                       source_dice=record.source_dice, target_dice=record.target_dice)
        target = "-" if record.target_dice is None else f"{record.target_dice:.3f}"
        logger.info(f"[{self.phase} {self.iteration}] validation Dice S={record.source_dice:.3f} T={target}")
        return record


    def _diverged(self, error: DivergenceDetected) -> None:
        self.save(LAST_NAME)
        payload = {"phase": self.phase, "iteration": self.iteration, "batch_ids": self.last_batch_ids,
                   "detail": error.detail}
        (self.rundir / DIVERGED_NAME).write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
        self.log_event("diverged", phase=self.phase, iteration=self.iteration)
        logger.error(f"Run diverged at {self.phase} iteration {self.iteration}: {error.detail}")

    def run(self, max_steps: Optional[int] = None) -> TrainResult:
        """Continue from the current (phase, iteration); stop after a checkpoint once `max_steps` are spent"""
        self.rundir.mkdir(parents=True, exist_ok=True)
        self.run_log = open_run_log(self.rundir)
        try:
            while self.phase != "done":
                if not self.run_phase(max_steps):
                    return TrainResult(self.rundir, RunStatus.RUNNING, None, self.records, interrupted=True)
            return TrainResult(self.rundir, RunStatus.COMPLETED, self.best_record(), self.records)
        finally:
            close_run_log(self.run_log)
            self.run_log = None

    def run_phase(self, max_steps: Optional[int] = None) -> bool:
        phase = self.phase
        length = self.phase_length(phase)
        if phase != "phase1":
            self._enter_adaptation()
        logger.info(f"Entering {phase} at iteration {self.iteration} of {length}")
        started, done_here = time.perf_counter(), 0

        while self.iteration < length:
            try:
                if phase == "phase1":
                    values = self._step_phase1()
                    report = LossReport(phase=phase, iteration=self.iteration, **values)
                else:
                    report = self._step_adaptation(translate=phase == "phase2")
            except DivergenceDetected as e:
                self._diverged(e)
                raise
            self.log(report)
            self.iteration += 1
            self.steps_taken += 1
            done_here += 1

            if phase != "phase1" and self.iteration % self.cfg.val_every == 0:
                self.run_validation()
            if self.iteration % self.cfg.checkpoint_every == 0:
                self.save(LAST_NAME)
                if max_steps is not None and self.steps_taken >= max_steps:
                    logger.info(f"Step budget {max_steps} reached at {phase} iteration {self.iteration}")
                    return False

        if phase != "phase1" and length > 0 and length % self.cfg.val_every != 0:
            self.run_validation()
        elapsed = time.perf_counter() - started
        if done_here:
            self.log_event("throughput", phase=phase, iteration=self.iteration - 1,
                           iters_per_sec=done_here / max(elapsed, 1e-9))
            logger.info(f"{phase}: {done_here} iterations, {done_here / max(elapsed, 1e-9):.2f} it/s")

        self.phase = PHASES[PHASES.index(phase) + 1]
        self.iteration = 0
        self.save(LAST_NAME)
        return True


# ==================== Phase entry points ====================

def _run_single_phase(phase: str, bundle: ModelBundle, bank: SliceBank, cfg: TrainConfig, rundir: Path,
                      val_sets: Optional[Dict[DomainTag, list]] = None) -> ModelBundle:
    trainer = Trainer(cfg, bank, rundir, val_sets=val_sets, bundle=bundle)
    trainer.phase = phase
    trainer.run_log = open_run_log(trainer.rundir)
    try:
        trainer.run_phase()
    finally:
        close_run_log(trainer.run_log)
    return trainer.bundle


def run_phase1(bundle: ModelBundle, bank: SliceBank, cfg: TrainConfig, rundir: Path) -> ModelBundle:
    """Adversarial training of G and D on every image of S and T"""
    return _run_single_phase("phase1", bundle, bank, cfg, rundir)


def pretrain_source(bundle: ModelBundle, bank: SliceBank, cfg: TrainConfig, rundir: Path,
                    val_sets: Optional[Dict[DomainTag, list]] = None) -> ModelBundle:
    """Encoder and label branch on source data only; no-op without source volumes"""
    return _run_single_phase("pretrain", bundle, bank, cfg, rundir, val_sets)


def run_phase2(bundle: ModelBundle, bank: SliceBank, cfg: TrainConfig, rundir: Path,
               val_sets: Optional[Dict[DomainTag, list]] = None) -> ModelBundle:
    """Adaptation with translation and cycle terms; the average latent is computed on entry"""
    return _run_single_phase("phase2", bundle, bank, cfg, rundir, val_sets)


# ==================== Run directories ====================

def load_val_sets(index: DatasetIndex, cfg: TrainConfig) -> Dict[DomainTag, list]:
    val_sets = {}
    for domain in DomainTag:
        entries = [e for e in index.select(Split.VAL, domain) if e.mask_path is not None]
        if cfg.val_max_volumes is not None:
            entries = entries[:cfg.val_max_volumes]
        val_sets[domain] = [load_pair(e, cfg) for e in entries]
    return val_sets


def _prepare(cfg: TrainConfig, data_root: Path, split: SplitSpec, rundir: Path) -> Trainer:
    torch.set_num_threads(get_settings().torch_threads)
    index = build_index(data_root, split)
    bank = SliceBank.from_index(index, cfg)
    return Trainer(cfg, bank, rundir, val_sets=load_val_sets(index, cfg))


def train_run(
    cfg: TrainConfig,
    data_root: Path,
    rundir: Path,
    split: SplitSpec,
    max_steps: Optional[int] = None,
) -> TrainResult:
    """Fresh run: write the resolved config and split, then train all phases"""
    rundir = Path(rundir)
    rundir.mkdir(parents=True, exist_ok=True)
    resolved = resolve_run_config(cfg, data_root)
    (rundir / RESOLVED_CONFIG_NAME).write_text(json.dumps(resolved, indent=2) + "\n", encoding="utf-8")
    save_split_spec(split, rundir / SPLIT_NAME)
    (rundir / "log.jsonl").unlink(missing_ok=True)
    trainer = _prepare(cfg, Path(data_root), split, rundir)
    logger.info(f"Training run {rundir} (config {cfg.config_hash()[:12]})")
    return trainer.run(max_steps=max_steps)


def resume_run(rundir: Path, cfg: Optional[TrainConfig] = None, max_steps: Optional[int] = None) -> TrainResult:
    """
    Continue a run from checkpoints/last.pt. The log is cut back to the checkpoint so
    the resumed trajectory appends exactly where the saved state left off.
    """
    rundir = Path(rundir)
    resolved = json.loads((rundir / RESOLVED_CONFIG_NAME).read_text(encoding="utf-8"))
    stored = TrainConfig.model_validate(resolved["config"])
    cfg = cfg or stored
    payload = load_checkpoint(rundir / CHECKPOINT_DIR / LAST_NAME)
    if payload["config_hash"] != cfg.config_hash() or resolved["config_hash"] != cfg.config_hash():
        raise ConfigMismatch(f"{rundir}: checkpoint config hash differs from the requested config")

    trainer = _prepare(cfg, Path(resolved["data_root"]), load_split_spec(rundir / SPLIT_NAME), rundir)
    trainer.load_state(payload)
    if trainer.phase == "done":
        logger.info(f"{rundir} already complete")
        return TrainResult(rundir, RunStatus.COMPLETED, trainer.best_record(), trainer.records)
    truncate_run_log(rundir, PHASES, trainer.phase, trainer.iteration - 1)
    logger.info(f"Resuming {rundir} at {trainer.phase} iteration {trainer.iteration}")
    return trainer.run(max_steps=max_steps)
