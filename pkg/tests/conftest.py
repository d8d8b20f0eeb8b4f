"""Shared fixtures: a small calibrated dataset and a bundle trained on it.

The recipe (canvas, ray size, drift, seeds) was chosen so the trained bundle
separates cleanly at this scale: every valid frame scores below the 0.5
threshold and every ray frame above it, with margin. Tests that assert
detection outcomes rely on that margin rather than re-deriving it.
"""

from __future__ import annotations

import pytest

from raywatch import pipelines
from raywatch.imagery import SynthConfig, generate_dataset
from raywatch.pipelines import PipelineConfig

UNIT_SYNTH = SynthConfig(
    canvas=(32, 48),
    shell_radius_frac=0.26,
    lobe_amp=0.14,
    noise_amp=0.0,
    ray_length_px=18.0,
    ray_width_px=9.0,
)
UNIT_DATASET_SEED = 6
UNIT_MODEL_SEED = 106
UNIT_N_VALID = 60
UNIT_N_ANOMALOUS = 8


@pytest.fixture(scope="session")
def unit_manifest(tmp_path_factory):
    out = tmp_path_factory.mktemp("unit-dataset")
    return generate_dataset(
        out,
        n_valid=UNIT_N_VALID,
        n_anomalous=UNIT_N_ANOMALOUS,
        seed=UNIT_DATASET_SEED,
        base=UNIT_SYNTH,
        drift=0.10,
        evolve_texture=False,
    )


@pytest.fixture(scope="session")
def unit_bundle(unit_manifest):
    config = PipelineConfig(model="iforest", pca=False, n_trees=125, seed=UNIT_MODEL_SEED)
    return pipelines.train_offline(unit_manifest, config)


@pytest.fixture(scope="session")
def unit_bundle_path(unit_bundle, tmp_path_factory):
    path = tmp_path_factory.mktemp("unit-bundle") / "bundle.fmc"
    pipelines.save_bundle(unit_bundle, path)
    return path
