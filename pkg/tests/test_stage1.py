"""Dense predictor: pyramid shapes, FPN widths, decoder arithmetic, losses,
and the small overfit training oracle."""

import numpy as np
import pytest

from omnictl import rng, scenes
from omnictl import tensor as T
from omnictl.metrics import rmse
from omnictl.stage1 import (
    LOSS_WEIGHTS,
    TASKS,
    DensePredictor,
    Stage1Config,
    TaskEmbedding,
    bce,
    one_hot_embeddings,
    predict_condition,
    stage1_loss,
    train_stage1,
)
from omnictl.tensor import ContractError, Tape, Tensor, grad_check

SMALL = Stage1Config(m=2, c=4, backbone_channels=16, fpn_channels=8, embed_hidden=16)


def _model(cfg=SMALL, seed=0):
    return DensePredictor(cfg, one_hot_embeddings(), seed)


def test_pyramid_shapes_at_64():
    model = _model()
    levels = model.extract_multiscale(Tensor(rng.normal(0, (1, 3, 64, 64), "pyr")))
    assert [lv.shape for lv in levels] == [
        (1, 16, 16, 16), (1, 16, 8, 8), (1, 16, 4, 4), (1, 16, 2, 2)]


def test_pyramid_rejects_bad_size():
    with pytest.raises(ContractError, match="48"):
        _model().extract_multiscale(Tensor(np.zeros((1, 3, 48, 48))))


def test_zero_image_zero_final_norm_finite():
    model = _model()
    model.p["s1.norm3.scale"].data[:] = 0.0
    model.p["s1.norm3.shift"].data[:] = 0.0
    levels = model.extract_multiscale(Tensor(np.zeros((1, 3, 32, 32))))
    for lv in levels:
        assert np.isfinite(lv.data).all()


def test_batch_of_two_equals_concat_of_singles():
    model = _model()
    imgs = rng.normal(1, (2, 3, 32, 32), "bs2")
    full = model.fpn_forward(model.extract_multiscale(Tensor(imgs))).data
    parts = [model.fpn_forward(model.extract_multiscale(Tensor(imgs[i:i + 1]))).data for i in range(2)]
    assert np.concatenate(parts).tobytes() == full.tobytes()


def test_fpn_output_channels_m_times_c():
    model = _model(Stage1Config(m=4, c=8, backbone_channels=16, fpn_channels=8), seed=1)
    out = model.fpn_forward(model.extract_multiscale(Tensor(rng.normal(2, (1, 3, 32, 32), "mc"))))
    assert out.shape == (1, 32, 32, 32)


def test_fpn_single_head_channels_c():
    model = _model(Stage1Config(m=1, c=8, backbone_channels=16, fpn_channels=8), seed=1)
    out = model.fpn_forward(model.extract_multiscale(Tensor(rng.normal(2, (1, 3, 32, 32), "mc1"))))
    assert out.shape == (1, 8, 32, 32)


def test_identical_heads_give_identical_blocks():
    model = _model(Stage1Config(m=2, c=4, backbone_channels=16, fpn_channels=8), seed=3)
    for lv in range(4):
        model.p["s1.h1.lat%d" % lv].data = model.p["s1.h0.lat%d" % lv].data.copy()
        model.p["s1.h1.lat%d.b" % lv].data = model.p["s1.h0.lat%d.b" % lv].data.copy()
    for nm in ("smooth", "smooth.b", "up", "up.b"):
        model.p[f"s1.h1.{nm}"].data = model.p[f"s1.h0.{nm}"].data.copy()
    out = model.fpn_forward(model.extract_multiscale(Tensor(rng.normal(4, (1, 3, 32, 32), "ih")))).data
    assert np.array_equal(out[:, :4], out[:, 4:])


def test_decode_zero_feature_is_half():
    model = _model()
    out = model.decode(Tensor(np.zeros((2, 8, 4, 4))), one_hot_embeddings()["depth"])
    assert np.all(out.data == 0.5)
    assert out.shape == (2, 1, 4, 4)


def test_decode_zero_projection_is_half():
    model = _model()
    model.p["s1.mlp.w2"].data[:] = 0.0
    model.p["s1.mlp.b2"].data[:] = 0.0
    feat = Tensor(rng.normal(5, (1, 8, 4, 4), "dzp"))
    assert np.all(model.decode(feat, one_hot_embeddings()["hed"]).data == 0.5)


def test_decode_hand_case_inner_product():
    # mC = 2, 1x1 spatial: feature (3,-1), projected task vector (1,2)
    model = _model(Stage1Config(m=2, c=1, backbone_channels=16, fpn_channels=8, embed_hidden=4), seed=2)
    model.p["s1.mlp.w2"].data[:] = 0.0
    model.p["s1.mlp.b2"].data = np.array([1.0, 2.0])
    feat = Tensor(np.array([3.0, -1.0]).reshape(1, 2, 1, 1))
    out = model.decode(feat, one_hot_embeddings()["depth"])
    assert out.data[0, 0, 0, 0] == pytest.approx(0.7310585786300049, abs=1e-12)


def test_decode_length_mismatch():
    model = _model()
    with pytest.raises(ContractError):
        model.decode(Tensor(np.zeros((1, 5, 2, 2))), one_hot_embeddings()["depth"])


def test_parameter_count_independent_of_task_count():
    all_tasks = _model(seed=7)
    eye = np.eye(4)
    single = DensePredictor(SMALL, {"depth": TaskEmbedding("one_hot", "depth", eye[0])}, 7)
    n_all = sum(p.size for p in all_tasks.params().values())
    n_one = sum(p.size for p in single.params().values())
    assert n_all == n_one


def test_one_hot_permutation_equivariance():
    # permuting task ids together with MLP first-layer rows leaves outputs unchanged
    model = _model(seed=8)
    feat = Tensor(rng.normal(9, (1, 8, 4, 4), "perm"))
    eye = np.eye(4)
    perm = [2, 0, 3, 1]
    before = [model.decode(feat, TaskEmbedding("one_hot", t, eye[i])).data
              for i, t in enumerate(TASKS)]
    model.p["s1.mlp.w1"].data = model.p["s1.mlp.w1"].data[perm]
    after = [model.decode(feat, TaskEmbedding("one_hot", t, eye[j])).data
             for j, t in enumerate(TASKS)]
    for j, i in enumerate(perm):
        assert np.array_equal(before[i], after[j])


# --- losses -------------------------------------------------------------------


def test_depth_loss_zero_at_match():
    x = Tensor(rng.stream(10, "dl").uniform(0.1, 0.9, (1, 1, 4, 4)))
    assert stage1_loss(x, x, "depth").item() == 0.0


def test_scribble_bce_at_half_is_5ln2():
    pred = Tensor(np.full((1, 1, 4, 4), 0.5))
    target = Tensor((rng.normal(11, (1, 1, 4, 4), "sb") > 0).astype(np.float64))
    assert stage1_loss(pred, target, "scribble").item() == pytest.approx(3.4657359027997265, abs=1e-12)


def test_weights_hed_vs_scribble_exactly_5x():
    g = rng.stream(12, "w5")
    pred = Tensor(g.uniform(0.05, 0.95, (1, 1, 4, 4)))
    target = Tensor((g.uniform(0, 1, (1, 1, 4, 4)) > 0.5).astype(np.float64))
    hed = stage1_loss(pred, target, "hed").item()
    scr = stage1_loss(pred, target, "scribble").item()
    assert scr == pytest.approx(5.0 * hed, rel=1e-12)
    assert LOSS_WEIGHTS == {"depth": 0.5, "hed": 1.0, "scribble": 5.0, "animal_pose": 5.0}


def test_unknown_task_rejected():
    x = Tensor(np.full((1, 1, 2, 2), 0.5))
    with pytest.raises(ContractError):
        stage1_loss(x, x, "segmentation")


@pytest.mark.parametrize("task", TASKS)
def test_stage1_loss_grad_check(task):
    g = rng.stream(13, "lgc", task)
    raw = Tensor(g.normal(0, 1, (1, 1, 3, 3)), requires_grad=True)
    target = T.constant((g.uniform(0, 1, (1, 1, 3, 3)) > 0.5).astype(np.float64))

    def f(r):
        return stage1_loss(T.sigmoid(r), target, task)

    assert grad_check(f, [raw]) < 1e-5


# --- training -----------------------------------------------------------------


@pytest.fixture(scope="module")
def tiny_corpus():
    return scenes.generate_corpus(21, 6, 2, size=32)


def test_train_zero_steps_identity(tiny_corpus):
    model, losses = train_stage1(tiny_corpus, SMALL, steps=0, seed=5)
    fresh = _model(SMALL, seed=5)
    assert losses == []
    for name, p in model.params().items():
        assert p.data.tobytes() == fresh.params()[name].data.tobytes()


def test_train_same_seed_bitwise(tiny_corpus):
    m1, l1 = train_stage1(tiny_corpus, SMALL, steps=5, seed=6)
    m2, l2 = train_stage1(tiny_corpus, SMALL, steps=5, seed=6)
    assert l1 == l2
    for name, p in m1.params().items():
        assert p.data.tobytes() == m2.params()[name].data.tobytes()


def test_train_empty_corpus_rejected():
    with pytest.raises(ContractError):
        train_stage1([], SMALL, steps=1, seed=0)


@pytest.fixture(scope="module")
def overfit_run():
    corpus = scenes.generate_corpus(22, 6, 2, size=32)[:8]
    cfg = Stage1Config(m=2, c=4, backbone_channels=16, fpn_channels=8,
                       embed_hidden=16, lr=2e-2, lr_floor=2e-3, batch=8)
    model, losses = train_stage1(corpus, cfg, steps=2000, seed=7)
    return corpus, model, losses


def test_overfit_depth_rmse_below_point_one(overfit_run):
    corpus, model, _ = overfit_run
    vals = []
    for s in corpus:
        if "depth" not in s.task_mask:
            continue
        pred = predict_condition(model, s.image, "depth")
        vals.append(rmse(pred, s.conditions["depth"]))
    assert np.mean(vals) < 0.1


def test_overfit_loss_decreases(overfit_run):
    _, _, losses = overfit_run
    assert np.mean(losses[-50:]) < 0.5 * np.mean(losses[:50])


def test_predict_condition_deterministic_and_shaped(overfit_run):
    corpus, model, _ = overfit_run
    img = corpus[0].image
    a = predict_condition(model, img, "depth")
    b = predict_condition(model, img, "depth")
    assert a.data.tobytes() == b.data.tobytes()
    assert a.shape == (1, 32, 32)


def test_tasks_decode_differently_after_training(overfit_run):
    corpus, model, _ = overfit_run
    img = corpus[0].image
    d = predict_condition(model, img, "depth").data
    h = predict_condition(model, img, "hed").data
    assert np.mean(np.abs(d - h)) > 0.01
