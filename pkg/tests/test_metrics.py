"""Metric oracles: naive-loop comparators, closed forms, order properties."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from omnictl import metrics as M
from omnictl import rng, scenes
from omnictl.metrics import GaussianStats, ap, feature_stats, frechet, ods, ois, pr_at_threshold, rmse
from omnictl.tensor import ContractError, ShapeError, Tensor


# --- oracles -------------------------------------------------------------------


def rmse_two_pass(p, g):
    total, n = 0.0, 0
    for pv, gv in zip(p.ravel(), g.ravel()):
        total += (pv - gv) ** 2
        n += 1
    return np.sqrt(total / n)


def brute_counts(p, g, tau):
    tp = fp = fn = 0
    for pv, gv in zip(p.ravel(), g.ravel()):
        b, t = pv > tau, gv > 0.5
        tp += b and t
        fp += b and not t
        fn += (not b) and t
    return tp, fp, fn


def brute_prf(tp, fp, fn):
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    return p, r, (2 * p * r / (p + r) if p + r else 0.0)


def brute_ods_ois_ap(preds, gts):
    taus = [i / 100.0 for i in range(1, 100)]
    per_img = [[brute_counts(p, g, tau) for tau in taus] for p, g in zip(preds, gts)]
    best_f = -1.0
    pr_points = []
    for j, tau in enumerate(taus):
        mean_f = np.mean([brute_prf(*ci[j])[2] for ci in per_img])
        best_f = max(best_f, mean_f)
        tp = sum(ci[j][0] for ci in per_img)
        fp = sum(ci[j][1] for ci in per_img)
        fn = sum(ci[j][2] for ci in per_img)
        p, r, _ = brute_prf(tp, fp, fn)
        pr_points.append((p, r))
    ois_val = np.mean([max(brute_prf(*c)[2] for c in ci) for ci in per_img])

    def env(r):
        vals = [p for p, rr in pr_points if rr >= r]
        return max(vals) if vals else 0.0

    nodes = sorted({0.0, 1.0} | {rr for _, rr in pr_points})
    area = sum((b - a) * (env(a) + env(b)) / 2.0 for a, b in zip(nodes[:-1], nodes[1:]))
    return best_f, float(ois_val), area


# --- rmse ------------------------------------------------------------------------


def test_rmse_identical_zero():
    x = rng.normal(0, (1, 8, 8), "rmse")
    assert rmse(x, x) == 0.0


def test_rmse_constant_offset():
    x = rng.normal(1, (1, 8, 8), "rmse-off")
    assert rmse(x, x + 0.5) == pytest.approx(0.5, abs=1e-12)


def test_rmse_matches_two_pass_oracle():
    p = rng.normal(2, (1, 6, 6), "rmse-p")
    g = rng.normal(3, (1, 6, 6), "rmse-g")
    assert rmse(p, g) == pytest.approx(rmse_two_pass(p, g), abs=1e-12)


def test_rmse_shape_mismatch():
    with pytest.raises(ShapeError):
        rmse(np.zeros((2, 2)), np.zeros((3, 3)))


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10**6))
def test_rmse_triangle_inequality(seed):
    g = np.random.Generator(np.random.Philox(key=seed))
    a, b, c = (g.uniform(0, 1, (1, 5, 5)) for _ in range(3))
    assert rmse(a, c) <= rmse(a, b) + rmse(b, c) + 1e-12


# --- precision / recall ------------------------------------------------------------


def test_pr_perfect_prediction():
    g = (rng.normal(4, (1, 8, 8), "pr") > 0).astype(np.float64)
    for tau in (0.1, 0.5, 0.9):
        pt = pr_at_threshold(g, g, tau)
        assert pt.precision == pt.recall == pt.f_measure == 1.0


def test_pr_all_zero_pred():
    g = np.ones((1, 4, 4))
    pt = pr_at_threshold(np.zeros((1, 4, 4)), g, 0.5)
    assert pt.recall == 0.0 and pt.f_measure == 0.0


def test_pr_checkerboard_matches_hand_count():
    pred = np.indices((4, 4)).sum(axis=0) % 2  # checkerboard
    gt = np.zeros((4, 4))
    gt[:2] = 1.0  # top half
    # hand count at tau=0.5: pred has 8 ones, 4 overlap with the 8 gt ones
    pt = pr_at_threshold(pred.astype(float), gt, 0.5)
    assert pt.precision == pytest.approx(4 / 8)
    assert pt.recall == pytest.approx(4 / 8)
    assert pt.f_measure == pytest.approx(0.5)


def test_pr_rejects_nonbinary_gt():
    with pytest.raises(ContractError):
        pr_at_threshold(np.zeros((2, 2)), np.full((2, 2), 0.3), 0.5)


def test_ods_ois_ap_perfect():
    gts = [(rng.normal(5, (1, 6, 6), "odsp", i) > 0).astype(np.float64) for i in range(3)]
    tau, f = ods(gts, gts)
    assert f == 1.0
    assert ois(gts, gts) == 1.0
    assert ap(gts, gts) == pytest.approx(1.0)


def test_ods_ois_ap_match_brute_force_sweep():
    g = rng.stream(6, "ods-bf")
    preds = [g.uniform(0, 1, (1, 8, 8)) for _ in range(3)]
    gts = [(g.uniform(0, 1, (1, 8, 8)) > 0.6).astype(np.float64) for _ in range(3)]
    bf_ods, bf_ois, bf_ap = brute_ods_ois_ap(preds, gts)
    assert ods(preds, gts)[1] == pytest.approx(bf_ods, abs=1e-12)
    assert ois(preds, gts) == pytest.approx(bf_ois, abs=1e-12)
    assert ap(preds, gts) == pytest.approx(bf_ap, abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10**6))
def test_ods_leq_ois_random_datasets(seed):
    g = np.random.Generator(np.random.Philox(key=seed))
    n = int(g.integers(2, 5))
    gts = [(g.uniform(0, 1, (1, 6, 6)) > 0.5).astype(np.float64) for _ in range(n)]
    preds = [np.clip(gt + g.normal(0, 0.35, gt.shape), 0, 1) for gt in gts]
    assert ods(preds, gts)[1] <= ois(preds, gts) + 1e-12


def test_ods_empty_list_rejected():
    with pytest.raises(ContractError):
        ods([], [])


# --- frechet ------------------------------------------------------------------------


def _stats_1d(mu, var):
    return GaussianStats(np.array([mu]), np.array([[var]]))


def test_frechet_identical_zero():
    s = GaussianStats(rng.normal(7, (4,), "fmu"), np.eye(4) * 2.0)
    assert frechet(s, s) == pytest.approx(0.0, abs=1e-9)


def test_frechet_1d_closed_forms():
    # (mu1-mu2)^2 + (sigma1-sigma2)^2
    assert frechet(_stats_1d(0, 1), _stats_1d(1, 1)) == pytest.approx(1.0, abs=1e-12)
    assert frechet(_stats_1d(0, 1), _stats_1d(0, 4)) == pytest.approx(1.0, abs=1e-12)


def test_frechet_matches_1d_closed_form_random():
    g = rng.stream(8, "f1d")
    for _ in range(10):
        m1, m2 = g.normal(0, 2, 2)
        v1, v2 = g.uniform(0.1, 3.0, 2)
        expect = (m1 - m2) ** 2 + (np.sqrt(v1) - np.sqrt(v2)) ** 2
        assert frechet(_stats_1d(m1, v1), _stats_1d(m2, v2)) == pytest.approx(expect, abs=1e-9)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10**6))
def test_frechet_symmetric_nonnegative(seed):
    g = np.random.Generator(np.random.Philox(key=seed))
    d = 3
    a_raw, b_raw = g.normal(0, 1, (8, d)), g.normal(0, 1, (8, d))
    a = GaussianStats(a_raw.mean(0), np.cov(a_raw, rowvar=False))
    b = GaussianStats(b_raw.mean(0), np.cov(b_raw, rowvar=False))
    ab, ba = frechet(a, b), frechet(b, a)
    assert ab >= 0.0
    assert ab == pytest.approx(ba, abs=1e-8)


def test_frechet_dim_mismatch():
    with pytest.raises(ShapeError):
        frechet(_stats_1d(0, 1), GaussianStats(np.zeros(2), np.eye(2)))


def test_frechet_rejects_asymmetric():
    bad = GaussianStats(np.zeros(2), np.array([[1.0, 0.5], [0.0, 1.0]]))
    with pytest.raises(ContractError):
        frechet(bad, bad)


# --- feature stats --------------------------------------------------------------------


def _flat_extractor(images):
    arr = np.stack([im.data if isinstance(im, Tensor) else np.asarray(im) for im in images])
    return arr.reshape(len(images), -1)


def test_feature_stats_duplicated_image_regularization_only():
    img = rng.normal(9, (1, 2, 2), "fs")
    st_ = feature_stats([img, img, img], _flat_extractor)
    assert np.array_equal(st_.cov, 1e-6 * np.eye(4))


def test_feature_stats_order_invariant():
    imgs = [rng.normal(10, (1, 2, 2), "fso", i) for i in range(5)]
    a = feature_stats(imgs, _flat_extractor)
    b = feature_stats(imgs[::-1], _flat_extractor)
    assert np.allclose(a.mean, b.mean) and np.allclose(a.cov, b.cov)


def test_feature_stats_matches_two_pass_oracle():
    imgs = [rng.normal(11, (1, 2, 2), "fs2", i) for i in range(8)]
    got = feature_stats(imgs, _flat_extractor)
    feats = _flat_extractor(imgs)
    mu = np.zeros(4)
    for f in feats:
        mu += f
    mu /= len(feats)
    cov = np.zeros((4, 4))
    for f in feats:
        cov += np.outer(f - mu, f - mu)
    cov /= len(feats) - 1
    assert np.allclose(got.mean, mu, atol=1e-10)
    assert np.allclose(got.cov, cov, atol=1e-10)


def test_feature_stats_empty_rejected():
    with pytest.raises(ContractError):
        feature_stats([], _flat_extractor)


# --- clip similarity --------------------------------------------------------------------


class _StubImgEnc:
    def __init__(self, vec):
        self.vec = np.asarray(vec, dtype=np.float64)

    def embed_np(self, imgs):
        return np.tile(self.vec / np.linalg.norm(self.vec), (len(imgs), 1))


class _StubTextEnc:
    def __init__(self, vec):
        self.vec = np.asarray(vec, dtype=np.float64)

    def encode(self, caption):
        class E:
            pooled = Tensor(self.vec)

        return E()


def test_clip_sim_identical_and_orthogonal():
    img = np.zeros((3, 4, 4))
    v = np.zeros(64)
    v[0] = 1.0
    assert M.clip_sim(img, "x", _StubImgEnc(v), _StubTextEnc(v)) == pytest.approx(1.0)
    w = np.zeros(64)
    w[1] = 1.0
    assert M.clip_sim(img, "x", _StubImgEnc(v), _StubTextEnc(w)) == pytest.approx(0.0)


def test_corpus_clip_score_is_mean():
    img = np.zeros((3, 4, 4))
    v = np.zeros(64)
    v[0] = 1.0
    w = np.zeros(64)
    w[0] = w[1] = 1.0
    enc = _StubImgEnc(v)
    scores = [M.clip_sim(img, c, enc, _StubTextEnc(u)) for c, u in (("a", v), ("b", w))]
    got = np.mean(scores)
    assert got == pytest.approx((1.0 + 1.0 / np.sqrt(2)) / 2)


def test_image_encoder_deterministic_and_normalized():
    enc = M.ImageEncoder(seed=3)
    imgs = rng.normal(12, (2, 3, 32, 32), "ie")
    e1, e2 = enc.embed_np(imgs), enc.embed_np(imgs)
    assert np.array_equal(e1, e2)
    assert np.allclose(np.linalg.norm(e1, axis=1), 1.0)


def test_alignment_training_reduces_loss():
    from omnictl.text import standard_encoder

    corpus = scenes.generate_corpus(31, 12, 3, size=32)
    tenc = standard_encoder(seed=2)
    ienc = M.ImageEncoder(seed=2)
    losses = M.train_alignment(ienc, tenc, corpus, steps=60, lr=3e-3, seed=5, batch=8)
    assert np.mean(losses[-10:]) < np.mean(losses[:10])


def test_fid_extractor_shapes_and_determinism():
    enc = M.ImageEncoder(seed=4)
    ext = M.FidExtractor(enc)
    imgs = rng.normal(13, (5, 3, 32, 32), "fidx")
    f1, f2 = ext(imgs), ext(imgs)
    assert f1.shape == (5, 16 + M.ImageEncoder.POOL_DIM)
    assert np.array_equal(f1, f2)


# --- reports ---------------------------------------------------------------------------


def test_metrics_csv_roundtrip(tmp_path):
    rows = [("toy_fid", "depth", "unified_stage2", 12.5), ("rmse", "depth", "stage1", 0.07)]
    M.write_metrics_csv(rows, tmp_path / "m.csv")
    got = M.read_metrics_csv(tmp_path / "m.csv")
    assert got[0][:3] == rows[0][:3]
    assert got[0][3] == pytest.approx(12.5)
    txt = (tmp_path / "m.csv").read_text()
    assert txt.splitlines()[0] == "metric,task,variant,value"


def test_markdown_summary_layout(tmp_path):
    rows = []
    for v in ("unified_stage2", "unified_stage1_2"):
        for t in ("depth", "hed", "scribble", "animal_pose"):
            rows.append(("toy_fid", t, v, 1.0))
            rows.append(("clip_t", t, v, 0.5))
    rows.append(("rmse", "depth", "stage1", 0.1))
    M.write_markdown_summary(rows, tmp_path / "r.md")
    txt = (tmp_path / "r.md").read_text()
    assert "toy-FID" in txt and "CLIP_t" in txt
    assert txt.count("| unified_stage2 |") == 2
