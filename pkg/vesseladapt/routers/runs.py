"""
Runs Router
Read-only view of the experiment ledger and each run's metrics
"""
import json
from pathlib import Path
from typing import List, Optional

from fastapi import APIRouter, Depends, Query
from sqlalchemy.orm import Session

from vesseladapt.database import get_db
from vesseladapt.exceptions import MissingFile
from vesseladapt.schemas import ErrorResponse, MetricsReport, RunResponse
from vesseladapt.services import RunRegistry
from vesseladapt.services.harness import EVAL_DIR
from vesseladapt.services.infer_eval import METRICS_JSON

router = APIRouter(prefix="/runs", tags=["Runs"], responses={404: {"model": ErrorResponse}})


@router.get("/", response_model=List[RunResponse])
def list_runs(
    experiment: Optional[str] = Query(None, description="Only runs of this experiment"),
    skip: int = Query(0, ge=0, description="Number of records to skip"),
    limit: int = Query(100, ge=1, le=100, description="Maximum number of records to return"),
    db: Session = Depends(get_db)
):
    """
    List recorded runs
    Endpoint: GET /runs
    """
    return RunRegistry.list_runs(db, experiment, skip, limit)


@router.get("/{run_id}", response_model=RunResponse)
def get_run(run_id: int, db: Session = Depends(get_db)):
    """Get a specific run by ID"""
    return RunRegistry.get_run(db, run_id)


@router.get("/{run_id}/metrics", response_model=MetricsReport)
def get_run_metrics(run_id: int, db: Session = Depends(get_db)):
    """Evaluation report of a run; 404 until the run has been evaluated"""
    run = RunRegistry.get_run(db, run_id)
    path = Path(run.rundir) / EVAL_DIR / METRICS_JSON
    if not path.exists():
        raise MissingFile(f"run {run_id} has no metrics yet")
    return MetricsReport.model_validate(json.loads(path.read_text(encoding="utf-8")))
