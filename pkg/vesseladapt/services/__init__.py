"""
Service Layer
Run ledger bookkeeping; the pipeline stages live in the sibling modules
"""
import logging
from typing import List, Optional

from sqlalchemy.orm import Session

from vesseladapt.exceptions import MissingFile
from vesseladapt.models import ExperimentRun
from vesseladapt.schemas import RunStatus

logger = logging.getLogger(__name__)


# ==================== Run Registry ====================

class RunRegistry:
    """Experiment ledger operations"""

    @staticmethod
    def record_run(
        db: Session,
        experiment: str,
        scenario: str,
        seed: int,
        rundir: str,
        sweep_kind: str = "none",
        sweep_value: str = "",
        config_hash: Optional[str] = None,
    ) -> ExperimentRun:
        """Create the ledger row for `rundir`, or return the existing one"""
        run = db.query(ExperimentRun).filter(ExperimentRun.rundir == rundir).first()
        if run:
            return run

        run = ExperimentRun(
            experiment=experiment,
            scenario=scenario,
            sweep_kind=sweep_kind,
            sweep_value=sweep_value,
            seed=seed,
            rundir=rundir,
            status=RunStatus.PENDING.value,
            config_hash=config_hash,
        )
        db.add(run)
        db.commit()
        db.refresh(run)
        logger.info(f"Recorded run {run.id}: {experiment} {sweep_kind}={sweep_value} seed={seed}")
        return run

    @staticmethod
    def get_run(db: Session, run_id: int) -> ExperimentRun:
        run = db.query(ExperimentRun).filter(ExperimentRun.id == run_id).first()
        if not run:
            raise MissingFile(f"run {run_id} not found")
        return run

    @staticmethod
    def update_status(
        db: Session,
        run_id: int,
        status: RunStatus,
        target_vessel_dice: Optional[float] = None,
        source_vessel_dice: Optional[float] = None,
    ) -> ExperimentRun:
        run = RunRegistry.get_run(db, run_id)
        run.status = RunStatus(status).value
        if target_vessel_dice is not None:
            run.target_vessel_dice = target_vessel_dice
        if source_vessel_dice is not None:
            run.source_vessel_dice = source_vessel_dice
        db.commit()
        db.refresh(run)
        return run

    @staticmethod
    def list_runs(
        db: Session,
        experiment: Optional[str] = None,
        skip: int = 0,
        limit: int = 100,
    ) -> List[ExperimentRun]:
        query = db.query(ExperimentRun)
        if experiment:
            query = query.filter(ExperimentRun.experiment == experiment)
        return query.order_by(ExperimentRun.id).offset(skip).limit(limit).all()
