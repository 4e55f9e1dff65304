import time

import pytest

from radslam import pipeline, synth, tracker
from radslam.imagecore import load_sequence


@pytest.fixture(scope="session")
def true_calibration():
    """Ground-truth response, noise model and confidence table."""
    return synth.true_response(), synth.true_noise(), synth.true_confidence()


@pytest.fixture(scope="session")
def flicker_runs(tmp_path_factory, true_calibration):
    """100-frame flicker sequence tracked with both objectives, timed."""
    curve, _, pcf = true_calibration
    d = tmp_path_factory.mktemp("flicker100")
    synth.generate_sequence(d, mode="flicker", n_frames=100, seed=7)
    seq = load_sequence(d)

    t0 = time.monotonic()
    res_norm = pipeline.run_sequence(seq, pipeline.PipelineConfig(),
                                     curve=curve, pcf=pcf)
    cfg_raw = pipeline.PipelineConfig()
    cfg_raw.tracker = tracker.TrackerConfig(objective="raw_intensity")
    res_raw = pipeline.run_sequence(seq, cfg_raw)
    elapsed = time.monotonic() - t0
    return seq, res_norm, res_raw, elapsed


@pytest.fixture(scope="session")
def smooth_run(tmp_path_factory, true_calibration):
    """100-frame smooth auto-exposure sequence tracked frame-to-model."""
    curve, _, pcf = true_calibration
    d = tmp_path_factory.mktemp("smooth100")
    synth.generate_sequence(d, mode="smooth", n_frames=100, seed=2)
    seq = load_sequence(d)
    res = pipeline.run_sequence(seq, pipeline.PipelineConfig(),
                                curve=curve, pcf=pcf)
    return seq, res
