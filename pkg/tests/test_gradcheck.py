import numpy as np
import pytest

from omuda.config import Config
from omuda.gradcheck import TERM_SETS, all_passed, check_gradients, gradcheck_batch, split_biases


def test_batch_activates_every_term():
    student, inp, part, lam, norm = gradcheck_batch(0)
    assert inp.feats_m is not None and inp.pre_stats is not None and inp.weights is not None
    assert list(inp.fg_ids) == [0, 1, 2] and all(c > 0 for c in inp.fg_counts)
    assert inp.feats_s.shape[:3] == (3, 8, 8)


def test_split_biases_keep_pixels_off_the_kink():
    rng = np.random.default_rng(3)
    W1 = rng.normal(size=(5, 16))
    fg = rng.normal(size=(40, 5))
    everything = np.concatenate([fg, rng.normal(size=(60, 5))])
    b = split_biases(W1, fg, everything)
    z = everything @ W1 + b
    assert np.min(np.abs(z)) > 1e-6
    # each unit is active on some but not all foreground pixels
    act = (fg @ W1 + b) > 0
    assert np.all(act.any(axis=0)) and np.all((~act).any(axis=0))


@pytest.mark.parametrize("seed", [0, 1])
def test_every_term_matches_finite_differences(seed):
    reports = check_gradients(seed)
    assert set(reports) == set(TERM_SETS)
    for name, r in reports.items():
        assert r.passed, f"{name}: {r}"
    assert all_passed(reports)


def test_inverted_mode_and_sum_normalizer():
    cfg = Config().with_overrides({"cdm.mode": "inverted", "fdm.normalization": "sum"})
    assert all_passed(check_gradients(2, config=cfg, names=["L_M", "L_D"]))
