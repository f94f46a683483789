"""
Test Configuration
Tiny networks and phantoms, an in-memory run ledger and the API test client
"""
import numpy as np
import pytest
from fastapi.testclient import TestClient
from sqlalchemy import create_engine
from sqlalchemy.orm import sessionmaker
from sqlalchemy.pool import StaticPool

from vesseladapt.database import Base, get_db
from vesseladapt.main import app
from vesseladapt.schemas import (
    AblationFlags,
    DomainSpec,
    DomainTag,
    NetConfig,
    Polarity,
    Scenario,
    TrainConfig,
    VolumeHeader,
)
from vesseladapt.services.synth_data import make_scenario, write_scenario
from vesseladapt.services.volume_io import SegMask, Volume

# Create in-memory SQLite database for testing
SQLALCHEMY_DATABASE_URL = "sqlite:///:memory:"

engine = create_engine(
    SQLALCHEMY_DATABASE_URL,
    connect_args={"check_same_thread": False},
    poolclass=StaticPool,
)
TestingSessionLocal = sessionmaker(autocommit=False, autoflush=False, bind=engine)

TINY_GRID = (16, 16, 12)


def override_get_db():
    """Override database dependency for testing"""
    try:
        db = TestingSessionLocal()
        yield db
    finally:
        db.close()


app.dependency_overrides[get_db] = override_get_db


@pytest.fixture(scope="function")
def db():
    """Create database tables for each test"""
    Base.metadata.create_all(bind=engine)
    db = TestingSessionLocal()
    try:
        yield db
    finally:
        db.close()
        Base.metadata.drop_all(bind=engine)


@pytest.fixture(scope="function")
def client(db):
    """Create test client with database setup"""
    return TestClient(app)


# ==================== Networks ====================

def tiny_net_config() -> NetConfig:
    return NetConfig(
        image_size=16,
        channels=3,
        z_dim=8,
        w_dim=8,
        n_mlp=2,
        base_channels=8,
        min_channels=4,
        lsb_hidden=8,
        encoder_channels=4,
        domain_embed_dim=2,
        skip_min_res=8,
        perceptual_channels=4,
    )


def tiny_train_config(**overrides) -> TrainConfig:
    values = dict(
        iters_phase1=2,
        iters_pretrain=2,
        iters_phase2=2,
        batch_size=4,
        r1_every=2,
        pl_every=2,
        val_every=2,
        checkpoint_every=1,
        val_max_volumes=1,
        seed=3,
        net=tiny_net_config(),
    )
    values.update(overrides)
    return TrainConfig(**values)


@pytest.fixture
def net_config():
    return tiny_net_config()


@pytest.fixture
def train_config():
    return tiny_train_config()


@pytest.fixture
def flags():
    return AblationFlags()


# ==================== Volumes ====================

def make_header(grid=(8, 8, 8), domain=DomainTag.SOURCE, subject="s0", spacing=(1.0, 1.0, 1.0), dtype="float32"):
    return VolumeHeader(grid_size=grid, spacing_mm=spacing, domain_tag=domain, subject_id=subject, dtype=dtype)


def make_volume(data: np.ndarray, domain=DomainTag.SOURCE, subject="s0", spacing=(1.0, 1.0, 1.0)) -> Volume:
    return Volume(header=make_header(data.shape, domain, subject, spacing), data=data.astype(np.float32))


def make_mask(labels: np.ndarray, domain=DomainTag.SOURCE, subject="s0", spacing=(1.0, 1.0, 1.0)) -> SegMask:
    return SegMask(header=make_header(labels.shape, domain, subject, spacing, "uint8"), labels=labels.astype(np.uint8))


@pytest.fixture
def tiny_spec():
    """A bright-vessel domain small enough for 16×16×12 phantoms"""
    return DomainSpec(
        polarity=Polarity.BRIGHT,
        tube_count_range=(2, 3),
        radius_range_vox=(1.0, 1.5),
        grid=TINY_GRID,
    )


@pytest.fixture
def data_root(tmp_path):
    """Wide-gap phantoms on the tiny grid: 3 source and 3 target training subjects, 1 val + 1 test each"""
    root = tmp_path / "data"
    source, target = make_scenario(Scenario.WIDE_GAP, 5, 5, seed=11, grid=TINY_GRID)
    split = write_scenario(root, source, target, n_val=1, n_test=1, n_labeled=1)
    return root, split
