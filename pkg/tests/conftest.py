"""Shared fixtures.  Thread pinning must happen before numpy is imported,
which is why it sits at the top of conftest rather than in a fixture:
single-threaded BLAS is what makes bitwise reproducibility claims testable.
"""

import os

for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import pytest

from vqagpt.config import RunConfig, apply_profile
from vqagpt.data import GeneratorSpec, generate_synthetic


@pytest.fixture(scope="session")
def mini_corpus(tmp_path_factory):
    """A small corpus sized for CLI and reproducibility tests (16px images)."""
    root = tmp_path_factory.mktemp("mini_corpus")
    spec = GeneratorSpec(grid=2, image_size=16, templates_per_type=3, test_fraction=0.25)
    train, test = generate_synthetic(seed=11, n_samples=264, spec=spec, out_dir=root)
    return {"root": root, "train": train, "test": test, "spec": spec}


@pytest.fixture(scope="session")
def desk_corpus(tmp_path_factory):
    """The full desk-profile corpus used by the learning benchmark."""
    root = tmp_path_factory.mktemp("desk_corpus")
    cfg = apply_profile(RunConfig(), "desk")
    spec = GeneratorSpec(
        grid=cfg.grid_size,
        image_size=cfg.image_size,
        templates_per_type=cfg.templates_per_type,
        test_fraction=cfg.test_fraction,
    )
    train, test = generate_synthetic(cfg.seed, cfg.n_samples, spec, out_dir=root)
    return {"root": root, "train": train, "test": test, "spec": spec, "cfg": cfg}


def mini_run_config(data_dir, out_dir, **overrides) -> RunConfig:
    """A fast-but-real training config matched to the mini corpus."""
    from dataclasses import replace

    base = RunConfig(
        d=16,
        n_layers=1,
        n_heads=2,
        mlp_ratio=2,
        max_pos=32,
        image_size=16,
        patch_grid=2,
        token_dim=16,
        vision_pose_mode="actual",
        lr=1e-3,
        epochs=2,
        batch_size=16,
        seed=5,
        n_samples=264,
        data_dir=str(data_dir),
        out_dir=str(out_dir),
    )
    return replace(base, **overrides)
