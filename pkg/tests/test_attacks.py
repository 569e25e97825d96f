import numpy as np
import pytest

from advmed import attacks as A
from advmed import tensor as T
from advmed.classifier import logits, predict
from advmed.data import Dataset, LabeledImage
from advmed.metrics import evaluate

BALL = A.PerturbationBall(0.02)


class LinearModel:
    """Logits [-w.x, w.x]: the closed-form optimum of an L-inf attack is known."""

    def __init__(self, w):
        self.w = np.asarray(w, dtype=np.float64)
        self.input_spec = self.w.shape
        self.weights = T.Tensor(np.stack([-self.w.ravel(), self.w.ravel()], axis=1))

    def forward(self, x):
        return T.matmul(T.flatten(x), self.weights)


def test_project_examples():
    assert A.project_linf([0.90], [0.50], BALL)[0] == pytest.approx(0.52, abs=1e-15)
    np.testing.assert_array_equal(A.project_linf([0.3, 0.7], [0.3, 0.7], BALL), [0.3, 0.7])
    assert A.project_linf([1.20], [0.99], BALL)[0] == 1.0


def test_project_idempotent(gen):
    a = gen.uniform(size=500)
    c = a + gen.normal(scale=0.1, size=500)
    once = A.project_linf(c, a, BALL)
    assert np.array_equal(A.project_linf(once, a, BALL), once)


def test_project_shape_mismatch():
    with pytest.raises(T.ShapeError):
        A.project_linf(np.zeros(3), np.zeros(2), BALL)


def test_ball_validation():
    with pytest.raises(A.AttackError):
        A.PerturbationBall(-0.1)
    with pytest.raises(A.AttackError):
        A.PerturbationBall(0.1, "l2")
    with pytest.raises(A.AttackError):
        A.PgdConfig(iterations=0)


def test_fgsm_examples():
    x = np.array([0.5, 0.5, 0.5])
    out = A.fgsm_step(x, [0.3, -0.2, 0.0], 0.02, toward_target=False)
    np.testing.assert_allclose(out, [0.52, 0.48, 0.5], rtol=0, atol=1e-15)
    assert np.array_equal(A.fgsm_step(x, np.zeros(3), 0.02, True), x)
    with pytest.raises(T.ShapeError):
        A.fgsm_step(x, np.zeros(2), 0.02, True)


def test_default_step_size():
    assert A.PgdConfig().step == pytest.approx(2.5 * 0.02 / 20)
    assert A.PgdConfig(step_size=0.01).step == 0.01


def test_epsilon_zero_is_identity(trained_model, small_data):
    _, te = small_data
    out = A.pgd_batch(trained_model, te.x, te.y, A.PgdConfig(A.PerturbationBall(0.0)))
    assert np.array_equal(out, te.x)


def test_linear_model_optimal_shift(gen):
    """Targeted PGD on a linear model moves the logit margin by exactly eps * ||w||_1."""
    w = gen.normal(scale=0.05, size=(1, 6, 6))
    w.ravel()[::7] = 0.0
    model = LinearModel(w)
    x = gen.uniform(0.1, 0.9, size=(4, 1, 6, 6))
    y = np.array([0, 1, 0, 1])
    eps = 0.02
    adv = A.pgd_batch(model, x, y, A.PgdConfig(A.PerturbationBall(eps)))
    before = (x.reshape(4, -1) @ w.ravel())
    after = (adv.reshape(4, -1) @ w.ravel())
    expected = eps * np.abs(w).sum()
    sign = np.where(y == 0, 1.0, -1.0)  # label 0 is pushed toward class 1, i.e. up
    np.testing.assert_allclose(sign * (after - before), expected, rtol=0, atol=1e-9)


def test_ball_containment(trained_model, small_data):
    _, te = small_data
    for cfg in (A.PgdConfig(), A.PgdConfig(random_start=True, seed=3), A.PgdConfig(targeted=False)):
        adv = A.pgd_batch(trained_model, te.x, te.y, cfg)
        assert np.abs(adv - te.x).max() <= 0.02 + 1e-12
        assert adv.min() >= 0 and adv.max() <= 1


def test_pgd_deterministic_and_attack_wrapper(trained_model, small_data):
    _, te = small_data
    a = A.pgd_batch(trained_model, te.x[:4], te.y[:4], A.PgdConfig())
    b = A.pgd_batch(trained_model, te.x[:4], te.y[:4], A.PgdConfig())
    assert a.tobytes() == b.tobytes()
    single = A.pgd_attack(trained_model, te[1], A.PgdConfig(), index=1)
    assert np.array_equal(single.pixels, a[1]) and single.label == te[1].label
    with pytest.raises(T.ShapeError):
        A.pgd_attack(trained_model, LabeledImage(np.zeros((1, 4, 4)), 0, "p", "i"), A.PgdConfig())


def test_pgd_moves_toward_target(trained_model, small_data):
    _, te = small_data
    adv = A.pgd_batch(trained_model, te.x, te.y, A.PgdConfig(A.PerturbationBall(0.05)))
    before = predict(trained_model, te.x)[np.arange(len(te)), 1 - te.y]
    after = predict(trained_model, adv)[np.arange(len(te)), 1 - te.y]
    assert np.mean(after > before) > 0.9


def test_epsilon_monotone_reach(trained_model, small_data):
    _, te = small_data
    x, y = te.x[:6], te.y[:6]
    losses = []
    for eps in (0.0, 0.01, 0.02, 0.05):
        adv = A.pgd_batch(trained_model, x, y, A.PgdConfig(A.PerturbationBall(eps)))
        z = logits(trained_model, adv)
        losses.append(-T.log_softmax_np(z)[np.arange(len(y)), 1 - y])
    for lo, hi in zip(losses[1:], losses[:-1]):
        assert np.all(lo <= hi + 1e-12)


def test_patch_side_and_region():
    assert A.patch_side(0.4, 32, 32) == 13
    assert A.patch_side(0.4, 100, 100) == 40
    img = np.zeros((1, 100, 100))
    patch = A.Patch(np.ones((1, 40, 40)), 0.4)
    out = A.apply_patch(img, patch, A.PlacementTransform(10, 20, 1, 0.4))
    assert int((out != img).sum()) == 40 * 40
    assert out[:, 10:50, 20:60].min() == 1.0


def test_patch_top_left_bit_exact(gen):
    img = gen.uniform(size=(1, 32, 32))
    patch = A.Patch(gen.uniform(size=(1, 13, 13)), 0.4)
    out = A.apply_patch(img, patch, A.PlacementTransform(0, 0, 0, 0.4))
    assert np.array_equal(out[:, :13, :13], patch.pixels)


def test_patch_rotation(gen):
    img = np.zeros((1, 32, 32))
    patch = A.Patch(gen.uniform(size=(1, 13, 13)), 0.4)
    out = A.apply_patch(img, patch, A.PlacementTransform(3, 4, 1, 0.4))
    assert np.array_equal(out[:, 3:16, 4:17], np.rot90(patch.pixels, 1, axes=(1, 2)))


def test_patch_locality(gen):
    img = gen.uniform(size=(1, 32, 32))
    for _ in range(20):
        patch = A.Patch(gen.uniform(size=(1, 7, 7)), 0.4)
        pl = A.sample_placement(gen, 0.4, 32, 32)
        out = A.apply_patch(img, patch, pl)
        mask = np.ones_like(img, dtype=bool)
        mask[:, pl.row : pl.row + 13, pl.col : pl.col + 13] = False
        assert np.array_equal(out[mask], img[mask])
        assert int((out != img).sum()) <= 13 * 13


def test_patch_errors():
    img = np.zeros((1, 32, 32))
    patch = A.Patch(np.ones((1, 13, 13)))
    with pytest.raises(A.AttackError, match="leaves"):
        A.apply_patch(img, patch, A.PlacementTransform(25, 0, 0, 0.4))
    with pytest.raises(A.AttackError, match="side"):
        A.apply_patch(img, patch, A.PlacementTransform(0, 0, 0, 0.01))
    with pytest.raises(A.AttackError):
        A.Patch(np.ones((1, 3, 4)))


def test_train_patch_zero_steps_is_gray(small_data, trained_model):
    tr, _ = small_data
    p = A.train_patch(trained_model, tr, 1, A.PatchConfig(steps=0))
    assert p.pixels.shape == (1, 13, 13)
    assert np.all(p.pixels == 0.5)
    with pytest.raises(A.AttackError):
        A.train_patch(trained_model, tr, 1, A.PatchConfig(scale=0.01))
    with pytest.raises(A.AttackError):
        A.train_patch(trained_model, Dataset(), 1)


def _held_out_objective(model, x, patch, seed=99):
    placed = np.stack([A.apply_patch(xi, patch, pl)
                       for xi, pl in zip(x, A.evaluation_placements(len(x), patch.scale, 32, 32, seed))])
    return A.mean_log_prob(model, placed, patch.target)


def test_train_patch_ascends_and_is_deterministic(small_data, trained_model):
    tr, te = small_data
    cfg = A.PatchConfig(steps=15, batch=8, seed=2)
    gray = A.train_patch(trained_model, tr, 0, A.PatchConfig(steps=0))
    p1 = A.train_patch(trained_model, tr, 0, cfg)
    p2 = A.train_patch(trained_model, tr, 0, cfg)
    assert p1.pixels.tobytes() == p2.pixels.tobytes()
    assert p1.pixels.min() >= 0 and p1.pixels.max() <= 1
    held = te.x[te.y == 1]
    assert _held_out_objective(trained_model, held, p1) >= _held_out_objective(trained_model, held, gray)


def test_natural_patch_argmax(small_data, trained_model):
    tr, _ = small_data
    for target in (0, 1):
        p = A.natural_patch(trained_model, tr, target)
        probs = predict(trained_model, tr.x)[:, target]
        best = [im.image_id for im in tr].index(p.metadata["source_image"])
        assert np.all(probs[best] >= probs)
        assert best == int(np.argmax(probs))
        assert p.pixels.shape == (1, 13, 13)


def test_natural_patch_single_image(trained_model, gen):
    im = LabeledImage(gen.uniform(size=(1, 32, 32)), 1, "p", "i")
    p = A.natural_patch(trained_model, Dataset((im,)), 1, scale=1.0)
    assert np.array_equal(p.pixels, im.pixels)
    with pytest.raises(A.AttackError):
        A.natural_patch(trained_model, Dataset(), 1)


def test_center_square():
    px = np.arange(2 * 4 * 6).reshape(2, 4, 6).astype(float)
    assert np.array_equal(A.center_square(px), px[:, :, 1:5])


def test_apply_patches_targets_wrong_label(gen):
    x = np.zeros((6, 1, 32, 32))
    y = np.array([0, 1, 0, 1, 1, 0])
    patches = {0: A.Patch(np.full((1, 13, 13), 0.25), target=0), 1: A.Patch(np.full((1, 13, 13), 0.75), target=1)}
    out = A.apply_patches(x, y, patches, seed=5)
    for xi, yi in zip(out, y):
        assert set(np.unique(xi)) == {0.0, 0.75 if yi == 0 else 0.25}
    assert np.array_equal(out, A.apply_patches(x, y, patches, seed=5))


def test_transfer_identical_models_equals_white_box(small_data, trained_model):
    tr, te = small_data
    cfg = A.PgdConfig()
    adv, metrics = A.transfer_attack(trained_model, trained_model, te.x, te.y, "pgd", cfg)
    white = A.pgd_batch(trained_model, te.x, te.y, cfg)
    assert adv.tobytes() == white.tobytes()
    assert metrics == evaluate(predict(trained_model, white), te.y)
    pc = A.PatchConfig(steps=3, batch=4)
    adv, metrics = A.transfer_attack(trained_model, trained_model, te.x, te.y, "patch",
                                     train_set=tr, patch_cfg=pc, place_seed=1)
    patches = {t: A.train_patch(trained_model, tr, t, pc) for t in (0, 1)}
    assert adv.tobytes() == A.apply_patches(te.x, te.y, patches, 1).tobytes()


def test_transfer_input_spec_mismatch(trained_model, small_data):
    _, te = small_data
    other = LinearModel(np.zeros((1, 8, 8)))
    with pytest.raises(A.AttackError, match="input_spec"):
        A.transfer_attack(trained_model, other, te.x, te.y)
    with pytest.raises(A.AttackError):
        A.transfer_attack(trained_model, trained_model, te.x, te.y, "patch")


def test_targeted_step_negates_untargeted(gen):
    x, g = gen.uniform(size=20), gen.normal(size=20)
    up = A.fgsm_step(x, g, 0.01, toward_target=False) - x
    down = A.fgsm_step(x, g, 0.01, toward_target=True) - x
    np.testing.assert_allclose(down, -up, rtol=0, atol=1e-15)
    zero = np.zeros(20)
    assert np.array_equal(A.fgsm_step(zero, g, 0.01, True), -A.fgsm_step(zero, g, 0.01, False))
