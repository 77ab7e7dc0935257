import csv
import math
import os
from dataclasses import replace

import numpy as np
import pytest

from src.blind_filter_net import preset
from src.errors import ShapeMismatchError, TrainingDivergedError
from src.image_core import BlurKernel, Image
from src.trainer import (
    DESK,
    PAPER,
    MomentumState,
    TrainConfig,
    TrainingCorpus,
    dihedral,
    evaluate,
    keep_dc_baseline,
    lr_at,
    make_example,
    make_validation_set,
    sgd_step,
    train,
    with_total_iters,
)
from src.weights_file import load_weights
from tests.oracles import natural_image, random_kernel


def _brute_valid(x: np.ndarray, k: np.ndarray) -> np.ndarray:
    s = k.shape[0]
    h, w = x.shape[0] - s + 1, x.shape[1] - s + 1
    out = np.zeros((h, w))
    for a in range(s):
        for b in range(s):
            out += k[a, b] * x[s - 1 - a:s - 1 - a + h, s - 1 - b:s - 1 - b + w]
    return out


@pytest.fixture
def corpus():
    rng = np.random.default_rng(99)
    train_imgs = [Image(natural_image(rng, 96)) for _ in range(3)]
    val_imgs = [Image(natural_image(rng, 96)) for _ in range(2)]
    kernels = [BlurKernel(random_kernel(rng, 5, 6)) for _ in range(4)]
    return TrainingCorpus(train_imgs, val_imgs, kernels, ["a", "b", "c"], ["d", "e"])


@pytest.fixture
def small_cfg():
    return replace(
        DESK,
        batch_size=4,
        total_iters=3,
        val_pairs=8,
        val_every=1,
        checkpoint_every=2,
        whitening_samples=2100,
        prefetch=2,
        threads=1,
        seed=5,
    )


class TestMakeExample:

    def test_delta_kernel_target_is_input_centre(self, rng, sharp_image):
        y, x = make_example(rng, sharp_image, BlurKernel.delta(5), 0.0)
        assert y.shape == (65, 65) and x.shape == (33, 33)
        np.testing.assert_allclose(y[16:49, 16:49], x, atol=1e-12)

    def test_deterministic(self, sharp_image):
        k = BlurKernel(random_kernel(np.random.default_rng(1), 7))
        a = make_example(np.random.default_rng(3), sharp_image, k, 0.01)
        b = make_example(np.random.default_rng(3), sharp_image, k, 0.01)
        np.testing.assert_array_equal(a[0], b[0])
        np.testing.assert_array_equal(a[1], b[1])

    def test_alignment_against_brute_force(self, rng):
        taps = random_kernel(rng, 5)
        side = 65 + 5 - 1
        sharp = natural_image(rng, side)
        y, x = make_example(rng, Image(sharp), BlurKernel(taps), 0.0)
        matches = []
        for e in range(8):
            crop = dihedral(sharp, e)
            if np.array_equal(crop[2 + 16:2 + 49, 2 + 16:2 + 49], x):
                matches.append(crop)
        assert matches, "target is not a dihedral crop of the sharp image"
        assert any(np.allclose(_brute_valid(c, taps), y, atol=1e-12) for c in matches)

    def test_undersized_image(self, rng):
        with pytest.raises(ShapeMismatchError):
            make_example(rng, Image(np.zeros((60, 60))), BlurKernel.delta(5), 0.0)

    def test_dihedral_group(self, rng):
        a = rng.standard_normal((5, 5))
        images = {dihedral(a, e).tobytes() for e in range(8)}
        assert len(images) == 8


class TestSgd:

    def test_plain_step(self):
        params = {"w": np.array([1.0, 2.0])}
        g = {"w": np.array([0.5, -1.0])}
        sgd_step(params, g, MomentumState.zeros_like(params), lr=1.0, momentum=0.0)
        np.testing.assert_array_equal(params["w"], [0.5, 3.0])

    def test_momentum_recurrence(self):
        params = {"w": np.zeros(3)}
        g = {"w": np.array([1.0, -2.0, 0.5])}
        state = MomentumState.zeros_like(params)
        sgd_step(params, g, state, 1.0, 0.9)
        sgd_step(params, g, state, 1.0, 0.9)
        np.testing.assert_allclose(params["w"], -g["w"] - 1.9 * g["w"], atol=1e-15)

    def test_zero_gradient_decays_velocity(self):
        params = {"w": np.array([1.0])}
        state = MomentumState({"w": np.array([2.0])})
        sgd_step(params, {"w": np.zeros(1)}, state, 1.0, 0.9)
        assert state.velocity["w"][0] == pytest.approx(1.8)
        assert params["w"][0] == pytest.approx(2.8)

    def test_non_finite_names_layer(self):
        params = {"fc.1.W": np.zeros(2)}
        with pytest.raises(TrainingDivergedError) as err:
            sgd_step(params, {"fc.1.W": np.array([np.nan, 0.0])}, MomentumState.zeros_like(params), 1.0, 0.9)
        assert err.value.layer == "fc.1"


class TestSchedule:

    def test_constant_before_drop_start(self):
        cfg = TrainConfig(lr=32.0, drop_start=800_000, lr_drop_every=100_000)
        assert lr_at(0, cfg) == 32.0
        assert lr_at(899_999, cfg) == 32.0

    def test_drop_after_interval(self):
        cfg = TrainConfig(lr=32.0, drop_start=800_000, lr_drop_every=100_000)
        assert lr_at(900_000, cfg) == pytest.approx(32.0 / math.sqrt(2))
        assert lr_at(1_000_000, cfg) == pytest.approx(16.0)

    def test_paper_schedule(self):
        assert (PAPER.total_iters, PAPER.drop_start, PAPER.lr_drop_every) == (1_800_000, 800_000, 100_000)
        assert PAPER.lr == 32.0 and PAPER.batch_size == 512

    def test_desk_run_anneals(self):
        rates = {lr_at(t, DESK) for t in range(DESK.total_iters)}
        assert len(rates) > 1
        assert lr_at(0, DESK) == DESK.lr
        assert lr_at(DESK.total_iters - 1, DESK) < DESK.lr / 16

    def test_rescaled_run_keeps_shape(self):
        cfg = with_total_iters(DESK, 1800)
        assert (cfg.total_iters, cfg.drop_start, cfg.lr_drop_every) == (1800, 800, 100)
        assert lr_at(799, cfg) == cfg.lr
        assert lr_at(900, cfg) == pytest.approx(cfg.lr / math.sqrt(2))
        assert len({lr_at(t, cfg) for t in range(cfg.total_iters)}) == 10


class TestCorpus:

    def test_overlapping_lists_rejected(self, corpus):
        with pytest.raises(ValueError, match="overlap"):
            TrainingCorpus(corpus.train_images, corpus.val_images, corpus.kernels, ["a", "b", "c"], ["c", "d"])

    def test_small_images_rejected(self, corpus):
        with pytest.raises(ShapeMismatchError):
            TrainingCorpus([Image(np.zeros((60, 60)))], corpus.val_images, corpus.kernels)


class TestTrain:

    def test_zero_iterations_returns_init(self, corpus, small_cfg, tmp_path):
        cfg = replace(small_cfg, total_iters=0)
        out = str(tmp_path / "w.ndbw")
        log = str(tmp_path / "history.csv")
        result = train(corpus, preset("tiny"), cfg, out, log)
        assert result.best_iter == 0
        assert len(result.history) == 1
        assert np.all(result.weights.params["out.W"] == 0)
        # untrained net is the keep-DC filter
        assert result.best_val_loss == pytest.approx(result.baseline_val_loss, rel=1e-9)
        with open(log, newline="") as f:
            rows = list(csv.DictReader(f))
        assert rows[0]["iter"] == "0" and rows[0]["train_loss"] == ""
        assert os.path.exists(out)

    def test_history_and_checkpoints(self, corpus, small_cfg, tmp_path):
        out = str(tmp_path / "w.ndbw")
        result = train(corpus, preset("tiny"), small_cfg, out, str(tmp_path / "h.csv"))
        assert [row["iter"] for row in result.history] == [0, 1, 2, 3]
        assert os.path.exists(out + ".last.ndbw")
        val_losses = [row["val_loss"] for row in result.history]
        assert result.best_val_loss == min(val_losses)
        saved = load_weights(out)
        val = make_validation_set(corpus, small_cfg)
        assert evaluate(saved, val) == result.best_val_loss

    def test_deterministic_across_threads(self, corpus, small_cfg, tmp_path):
        a = train(corpus, preset("tiny"), small_cfg, str(tmp_path / "a.ndbw"))
        b = train(corpus, preset("tiny"), replace(small_cfg, threads=3), str(tmp_path / "b.ndbw"))
        assert a.history == b.history
        with open(tmp_path / "a.ndbw", "rb") as fa, open(tmp_path / "b.ndbw", "rb") as fb:
            assert fa.read() == fb.read()

    def test_validation_is_frozen(self, corpus, small_cfg, tiny_weights):
        val = make_validation_set(corpus, small_cfg)
        assert evaluate(tiny_weights, val) == evaluate(tiny_weights, make_validation_set(corpus, small_cfg))
        assert keep_dc_baseline(val) > 0

    def test_divergence_keeps_best_checkpoint(self, corpus, small_cfg, tmp_path):
        out = str(tmp_path / "w.ndbw")
        cfg = replace(small_cfg, lr=1e300, total_iters=5)
        with np.errstate(all="ignore"):
            with pytest.raises(TrainingDivergedError):
                train(corpus, preset("tiny"), cfg, out)
        assert load_weights(out).n_params > 0
