import numpy as np
import pytest

from ueraser import augment as aug
from ueraser import ndgrad as nd
from ueraser import trainer as T
from ueraser.datasets import SynthSpec, synth_dataset
from reference import ref_forward


@pytest.fixture(scope="module")
def data():
    return synth_dataset(SynthSpec(height=8, width=8, train_per_class=12, test_per_class=5, seed=1))


def _params(seed=0, shape=(3, 8, 8)):
    return nd.init_params(shape, 4, seed)


def _ref_ce(arrays, x, y):
    z = ref_forward(arrays, x.astype(np.float64))
    z = z - z.max(axis=1, keepdims=True)
    return np.log(np.exp(z).sum(axis=1)) - z[np.arange(len(y)), y]


def test_config_invariants():
    with pytest.raises(nd.ConfigError, match="Lite requires K=1"):
        T.TrainConfig(variant="lite", repeats=5).validate()
    with pytest.raises(nd.ConfigError, match="Max requires W=E"):
        T.TrainConfig(variant="max", epochs=5, warmup=2).validate()
    with pytest.raises(nd.ConfigError):
        T.TrainConfig(epochs=3, warmup=4).validate()
    with pytest.raises(nd.ConfigError):
        T.TrainConfig(repeats=0).validate()
    with pytest.raises(nd.ConfigError):
        T.TrainConfig(variant="sgd").validate()
    cfg = T.TrainConfig(epochs=6, warmup=2)
    assert [cfg.repeats_at(e) for e in range(1, 7)] == [5, 5, 1, 1, 1, 1]


def test_selection_matches_brute_force(data):
    tr, _ = data
    p = _params(3)
    for b in range(6):
        idx = np.arange(b * 8, b * 8 + 8)
        sel = T.max_loss_select(p, tr.images[idx], tr.labels[idx], 4, (11, 2, idx))
        for i, gi in enumerate(idx):
            losses = []
            for j in range(4):
                s = aug.sample_policy((11, 2, int(gi), j))
                img = aug.apply(s, tr.images[gi])
                losses.append(_ref_ce(p.arrays, img[None], tr.labels[gi:gi + 1])[0])
            np.testing.assert_allclose(sel.losses[i], losses, rtol=1e-4, atol=1e-6)
            want = int(np.argmax(sel.losses[i]))
            assert sel.choice[i] == want
            assert sel.selected[i] == sel.losses[i].max()
            assert sel.samples[i] == aug.sample_policy((11, 2, int(gi), want))
            np.testing.assert_array_equal(sel.images[i], aug.apply(sel.samples[i], tr.images[gi]))


def test_ties_go_to_lowest_index(data):
    tr, _ = data
    idx = np.arange(10)
    sel = T.max_loss_select(_params(), tr.images[idx], tr.labels[idx], 5, (0, 1, idx), components=frozenset())
    assert (sel.choice == 0).all()
    assert (sel.losses == sel.losses[:, :1]).all()


def test_k1_returns_single_sample(data):
    tr, _ = data
    idx = np.arange(6)
    sel = T.max_loss_select(_params(), tr.images[idx], tr.labels[idx], 1, (0, 1, idx))
    assert sel.losses.shape == (6, 1) and (sel.choice == 0).all()
    np.testing.assert_array_equal(sel.selected, sel.losses[:, 0])


def test_selection_does_not_touch_params(data):
    tr, _ = data
    p = _params(2)
    before = {k: v.copy() for k, v in p.arrays.items()}
    idx = np.arange(8)
    T.max_loss_select(p, tr.images[idx], tr.labels[idx], 3, (0, 1, idx))
    for k in before:
        np.testing.assert_array_equal(before[k], p.arrays[k])


def test_selected_loss_monotone_in_k(data):
    tr, _ = data
    p = _params(5)
    m1, m5, first = [], [], []
    for b in range(6):
        idx = np.arange(b * 8, b * 8 + 8)
        s1 = T.max_loss_select(p, tr.images[idx], tr.labels[idx], 1, (4, 1, idx))
        s5 = T.max_loss_select(p, tr.images[idx], tr.labels[idx], 5, (4, 1, idx))
        m1.append(s1.selected.mean())
        m5.append(s5.selected.mean())
        first.append(s5.losses[:, 0].mean())
        # draw 0 is shared, so the max dominates it image by image
        np.testing.assert_array_equal(s5.losses[:, 0], s1.losses[:, 0])
        assert (s5.selected >= s5.losses[:, 0]).all()
    assert np.mean(m5) >= np.mean(m1)


def _trajectory(cfg, tr):
    snaps = []
    T.train(cfg, tr, on_epoch_end=lambda e, p: snaps.append(b"".join(p.arrays[k].tobytes() for k in nd.PARAM_ORDER)))
    return snaps


def test_reduction_equalities(data):
    tr, _ = data
    kw = dict(epochs=3, batch_size=16, seed=4)
    lite = _trajectory(T.TrainConfig(variant="lite", repeats=1, warmup=0, **kw), tr)
    k1 = _trajectory(T.TrainConfig(variant="ueraser", repeats=1, warmup=0, **kw), tr)
    assert lite == k1
    mx = _trajectory(T.TrainConfig(variant="max", repeats=3, warmup=3, **kw), tr)
    full = _trajectory(T.TrainConfig(variant="ueraser", repeats=3, warmup=3, **kw), tr)
    assert mx == full and mx != lite


def test_thread_count_independence(data):
    tr, _ = data
    kw = dict(variant="ueraser", epochs=2, warmup=1, repeats=2, batch_size=16, seed=1)
    a = _trajectory(T.TrainConfig(threads=1, **kw), tr)
    b = _trajectory(T.TrainConfig(threads=3, **kw), tr)
    assert a == b


def test_metrics_stream(data):
    tr, te = data
    cfg = T.TrainConfig(variant="ueraser", epochs=3, warmup=2, repeats=3, batch_size=16)
    res = T.train(cfg, tr, te)
    assert len(res.records) == 6
    assert [r.split for r in res.records] == ["train", "test"] * 3
    for r in res.records:
        assert 0 <= r.accuracy <= 1 and r.wall_ms >= 0
        if r.split == "train":
            assert r.selected_loss >= r.pre_selection_loss - 1e-9
    assert res.final("test") is res.records[-1]


def test_pgd_budget_and_zero_steps(data):
    tr, _ = data
    p = _params(1)
    x, y = tr.images[:16], tr.labels[:16]
    assert T.pgd_perturb(p, x, y, 4 / 255, 0) is x
    for norm, eps in (("linf", 4 / 255), ("l2", 0.25)):
        adv = T.pgd_perturb(p, x, y, eps, 7, norm, np.random.default_rng(0))
        d = (adv - x).reshape(16, -1).astype(np.float64)
        n = np.abs(d).max(axis=1) if norm == "linf" else np.linalg.norm(d, axis=1)
        assert n.max() <= eps + 1e-6
        assert adv.min() >= 0 and adv.max() <= 1
        base = nd.mean(nd.cross_entropy(nd.forward(p, x), y)).data
        assert nd.mean(nd.cross_entropy(nd.forward(p, adv), y)).data > base


def test_adversarial_zero_steps_is_plain(data):
    tr, _ = data
    kw = dict(epochs=2, batch_size=16, seed=2)
    plain = _trajectory(T.TrainConfig.for_variant("plain", **kw), tr)
    snaps = []
    T.adversarial_train(T.TrainConfig(**kw), tr, eps=4 / 255, steps=0,
                        on_epoch_end=lambda e, p: snaps.append(b"".join(p.arrays[k].tobytes() for k in nd.PARAM_ORDER)))
    assert snaps == plain


def test_evaluate_cases(data):
    _, te = data
    p = _params(7)
    before = {k: v.copy() for k, v in p.arrays.items()}
    pred = nd.predict_logits(p, te.images).argmax(axis=1)
    perfect = type(te)(te.images, pred, te.num_classes, "test")
    acc, conf = T.evaluate(p, perfect)
    assert acc == 1.0 and np.count_nonzero(conf - np.diag(np.diag(conf))) == 0
    # constant predictor: zero weights, one-hot bias
    const = p.copy()
    const.arrays["dense.w"][:] = 0
    const.arrays["dense.b"][:] = [0, 0, 1, 0]
    acc, conf = T.evaluate(const, te)
    assert np.count_nonzero(conf.sum(axis=0)) == 1 and conf[:, 2].sum() == len(te)
    assert acc == pytest.approx(0.25)
    np.testing.assert_array_equal(conf.sum(axis=1), te.class_counts())
    for k in before:
        np.testing.assert_array_equal(before[k], p.arrays[k])
    np.testing.assert_allclose(T.per_class_accuracy(conf), [0, 0, 1, 0])


def test_divergence_raises_with_snapshot(data):
    tr, _ = data
    cfg = T.TrainConfig(variant="plain", epochs=2, warmup=0, repeats=1, batch_size=16, lr=1e38, grad_clip=None)
    with pytest.raises(T.TrainingDiverged) as err:
        T.train(cfg, tr)
    assert err.value.params is not None
    assert all(np.isfinite(v).all() for v in err.value.params.arrays.values())
