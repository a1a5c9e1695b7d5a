import copy
import math
import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from semrode import diffcore as dc
from semrode.attack import AttackConfig, SubstitutionSource, build_substitution_source
from semrode.distances import median_bandwidth
from semrode.textmodel import Example, PooledClassifier
from semrode.training import (
    CURVE_HEADER, AdversarialSet, EmptyAdversarialSetWarning, TrainConfig, TrainingDivergedError, fit,
    generate_offline_adv_set, read_curve, subsample_indices, train, train_step_baseline, train_step_semrode,
    write_curve,
)

from conftest import make_table, numeric_grad


def reference_subsample(n, ratio, seed):
    idx = list(range(n))
    rng = random.Random(seed)
    for i in range(n - 1, 0, -1):  # Fisher-Yates, as random.shuffle does it
        j = rng.randrange(i + 1)
        idx[i], idx[j] = idx[j], idx[i]
    return idx[: int(ratio * n + 1e-9)]


def test_subsample_matches_reference_shuffle():
    assert subsample_indices(20, 0.3, 42) == reference_subsample(20, 0.3, 42)
    assert len(subsample_indices(20, 0.1, 0)) == 2
    with pytest.raises(ValueError):
        subsample_indices(20, 0.0, 0)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 300), st.floats(0.01, 1.0), st.integers(0, 2**31))
def test_subsample_properties(n, ratio, seed):
    idx = subsample_indices(n, ratio, seed)
    assert idx == reference_subsample(n, ratio, seed)
    assert len(set(idx)) == len(idx) == math.floor(ratio * n + 1e-9)
    assert all(0 <= i < n for i in idx)


# ---------------------------------------------------------------- one step against finite differences

def _np_forward(params, pooled):
    W1, b1, W2, b2 = params
    h = np.maximum(pooled @ W1 + b1, 0.0)
    return h, h @ W2 + b2


def _np_ce(logits, labels):
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return -logp[np.arange(len(labels)), labels].mean()


def _np_coral(a, b):
    d = a.shape[1]
    return np.sum((np.cov(a, rowvar=False) - np.cov(b, rowvar=False)) ** 2) / (4 * d * d)


def _np_mmd(a, b, sigma2):
    k = lambda x, y: np.exp(-((x[:, None] - y[None]) ** 2).sum(-1) / (2 * sigma2)).mean()
    return k(a, a) + k(b, b) - 2 * k(a, b)


@pytest.mark.parametrize("distance", ["coral", "mmd"])
def test_semrode_step_matches_finite_difference_descent(tiny_table, distance):
    model = PooledClassifier(tiny_table, 2, hidden=3, seed=2)
    base = [Example(("good", "movie"), 1), Example(("bad", "film"), 0)]
    adv = [Example(("great", "movie"), 1), Example(("awful", "film"), 0)]
    pb = model.pooled([e.text for e in base])
    pa = model.pooled([e.text for e in adv])
    labels = np.array([1, 0])
    lam, lr = 0.7, 0.1
    start = [p.value.copy() for p in model.parameters()]
    if distance == "mmd":
        sigma2 = median_bandwidth(_np_forward(start, pb)[0], _np_forward(start, pa)[0])

    def loss(params):
        hb, logits = _np_forward(params, pb)
        ha, _ = _np_forward(params, pa)
        d = _np_coral(hb, ha) if distance == "coral" else _np_mmd(hb, ha, sigma2)
        return _np_ce(logits, labels) + lam * d

    expected = []
    for k in range(4):
        def f(x, k=k):
            params = list(start)
            params[k] = x
            return loss(params)
        expected.append(start[k] - lr * numeric_grad(f, start[k].copy()))
    res = train_step_semrode(model, base, adv, distance, lam, lr)
    assert res.loss == pytest.approx(loss(start), abs=1e-9)
    for p, e in zip(model.parameters(), expected):
        assert np.allclose(p.value, e, atol=1e-5, rtol=0)


def test_lambda_zero_is_vanilla_bit_for_bit(tiny_model, tiny_data):
    a, b = copy.deepcopy(tiny_model), copy.deepcopy(tiny_model)
    train_step_semrode(a, tiny_data[:4], tiny_data[2:6], "mmd", 0.0, 0.05)
    train_step_baseline(b, tiny_data[:4], "vanilla", lr=0.05)
    for p, q in zip(a.parameters(), b.parameters()):
        assert p.value.tobytes() == q.value.tobytes()


@pytest.mark.parametrize("distance", ["mmd", "coral", "sinkhorn"])
def test_identical_adversarial_batch_has_zero_distance(tiny_model, tiny_data, distance):
    res = train_step_semrode(tiny_model, tiny_data[:4], tiny_data[:4], distance, 1.0)
    assert res.loss_dist <= 1e-6
    assert res.loss == pytest.approx(res.loss_base + res.loss_dist, abs=1e-9)


def test_loss_decomposition(tiny_model, tiny_data):
    res = train_step_semrode(tiny_model, tiny_data[:3], tiny_data[3:], "mmd", 2.5)
    assert res.loss_dist > 0
    assert abs(res.loss - (res.loss_base + 2.5 * res.loss_dist)) <= 1e-9


def test_anchor_batch_replaces_base_in_distance(tiny_model, tiny_data):
    res = train_step_semrode(tiny_model, tiny_data[:2], tiny_data[2:4], "mmd", 1.0, anchor_batch=tiny_data[2:4])
    assert res.loss_dist <= 1e-12


def test_baseline_identities(tiny_model, tiny_data):
    base, adv = tiny_data[:3], tiny_data[3:]
    ref = copy.deepcopy(tiny_model)
    train_step_baseline(ref, base, "vanilla")
    for mode, kw in (("adv_aug", dict(adv_batch=())), ("adv_reg", dict(adv_batch=adv, lam1=0.0))):
        m = copy.deepcopy(tiny_model)
        train_step_baseline(m, base, mode, **kw)
        for p, q in zip(m.parameters(), ref.parameters()):
            assert p.value.tobytes() == q.value.tobytes()
    m = copy.deepcopy(tiny_model)
    ce_b = float(dc.softmax_cross_entropy(m.logits(m.features([e.text for e in base])), [e.label for e in base]).value)
    ce_a = float(dc.softmax_cross_entropy(m.logits(m.features([e.text for e in adv])), [e.label for e in adv]).value)
    assert abs(train_step_baseline(m, base, "adv_reg", adv) - (ce_b + ce_a)) <= 1e-12
    with pytest.raises(ValueError):
        train_step_baseline(m, base, "semrode")


def test_freeze_feature_layer(tiny_model, tiny_data):
    w1, b1, w2 = tiny_model.W1.value.copy(), tiny_model.b1.value.copy(), tiny_model.W2.value.copy()
    train_step_semrode(tiny_model, tiny_data[:3], tiny_data[3:], "coral", 1.0, freeze_feature_layer=True)
    assert np.array_equal(tiny_model.W1.value, w1) and np.array_equal(tiny_model.b1.value, b1)
    assert not np.array_equal(tiny_model.W2.value, w2)


def _adv_set(data):
    return AdversarialSet([(e, e) for e in data[:3]], attempted=3)


def test_zero_epochs_leave_model_untouched(tiny_model, tiny_data):
    before = [p.value.copy() for p in tiny_model.parameters()]
    _, curve = train(tiny_model, tiny_data, _adv_set(tiny_data), TrainConfig(epochs=0))
    assert curve == []
    assert all(np.array_equal(p.value, b) for p, b in zip(tiny_model.parameters(), before))


@pytest.mark.parametrize("pairing", ["independent", "matched"])
def test_training_is_deterministic(tiny_table, tiny_data, pairing):
    cfg = TrainConfig(epochs=3, batch_size=4, pairing=pairing)
    runs = []
    for _ in range(2):
        model = PooledClassifier(tiny_table, 2, hidden=5, seed=1)
        model, curve = train(model, tiny_data, _adv_set(tiny_data), cfg, probe=tiny_data)
        runs.append(([p.value.tobytes() for p in model.parameters()], curve))
    assert runs[0] == runs[1]


def test_pairing_changes_the_distance_term(tiny_table, tiny_data):
    adv = AdversarialSet([(tiny_data[0], tiny_data[4]), (tiny_data[2], tiny_data[5])], attempted=2)
    out = {}
    for pairing in ("independent", "matched"):
        model = PooledClassifier(tiny_table, 2, hidden=5, seed=1)
        out[pairing] = train(model, tiny_data, adv, TrainConfig(epochs=2, batch_size=3, pairing=pairing))[1]
    assert [r.dist for r in out["independent"]] != [r.dist for r in out["matched"]]
    with pytest.raises(ValueError):
        TrainConfig(pairing="zip")


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_names_epoch_and_step(tiny_table, tiny_data):
    model = PooledClassifier(tiny_table, 2, hidden=5, seed=1)
    with pytest.raises(TrainingDivergedError, match=r"epoch 1, step \d+"):
        train(model, tiny_data, None, TrainConfig(objective="vanilla", epochs=1, batch_size=2, learning_rate=1e250))


def test_curve_rows_and_csv(tmp_path, tiny_table, tiny_data):
    model = PooledClassifier(tiny_table, 2, hidden=5, seed=1)
    _, curve = train(model, tiny_data, _adv_set(tiny_data), TrainConfig(epochs=2, batch_size=3), probe=tiny_data)
    assert [r.epoch for r in curve] == [1, 2]
    path = tmp_path / "curve.csv"
    write_curve(curve, path)
    assert path.read_text().splitlines()[0] == ",".join(CURVE_HEADER)
    assert read_curve(path) == curve


def test_adversarial_set_roundtrip_and_sidecar(tmp_path, tiny_data):
    src = SubstitutionSource("syn", {"good": ("great",)})
    s = AdversarialSet([(tiny_data[0], Example(("the", "great", "movie"), 1))], AttackConfig(src), attempted=4)
    path = tmp_path / "adv.tsv"
    s.save(path, sidecar={"seed_data": 42})
    back = AdversarialSet.load(path)
    assert back.pairs == s.pairs
    import json
    meta = json.loads(path.with_suffix(".json").read_text())
    assert meta["kept"] == 1 and meta["attempted"] == 4 and meta["attack"]["source"] == "syn" and meta["seed_data"] == 42


def test_empty_adversarial_set_warns(tiny_model, tiny_data):
    cfg = AttackConfig(SubstitutionSource("none", {}))
    with pytest.warns(EmptyAdversarialSetWarning):
        s = generate_offline_adv_set(tiny_model, tiny_data, cfg, ratio=0.5, seed=0)
    assert len(s) == 0 and s.attempted == 3
    # training still runs and falls back to plain cross-entropy
    _, curve = train(tiny_model, tiny_data, s, TrainConfig(epochs=1, batch_size=3))
    assert curve[0].dist == 0.0


def test_generated_pairs_keep_labels_and_constraints(tiny_table, tiny_data):
    model = PooledClassifier(tiny_table, 2, hidden=5, seed=0)
    cfg = AttackConfig(build_substitution_source(tiny_table, 3, 0.5), n_candidates=3, max_perturb_ratio=1.0)
    s = generate_offline_adv_set(model, tiny_data, cfg, ratio=1.0, seed=0)
    assert len(s) >= 1 and s.attempted == len(tiny_data)
    for base, adv in s.pairs:
        assert adv.label == base.label and adv.text != base.text
        assert model.predict(adv.text)[0] != base.label


def test_fit_requires_generation_attack_for_adversarial_objectives(tiny_table, tiny_data):
    with pytest.raises(ValueError, match="generation attack"):
        fit(tiny_table, tiny_data, TrainConfig(objective="adv_aug", epochs=1), None)
    res = fit(tiny_table, tiny_data, TrainConfig(objective="vanilla", epochs=1, warmup_epochs=0, hidden=4), None)
    assert len(res.adv_set) == 0 and len(res.curve) == 1


def test_config_validation():
    for bad in (dict(objective="x"), dict(distance="l1"), dict(adv_ratio=0), dict(lam=-1), dict(batch_size=0)):
        with pytest.raises(ValueError):
            TrainConfig(**bad)
