import json
import math

import numpy as np
import pytest

from kgant import autograd as ag
from kgant import data as D
from kgant import metrics
from kgant.model import PredictionBundle, WindowBatch
from oracles import levenshtein_table, loss_loops, moc_counting, run_length


def make_case(seed, B=2, n=4, M=3, C=5):
    r = np.random.default_rng(seed)
    batch = WindowBatch(
        feats=np.zeros((B, n, 1)), obs_mask=np.ones((B, n)), n_obs=[n] * B, visual=np.zeros((B, 1)),
        node_idx=np.zeros((B, 1), dtype=np.int64), node_depth=np.zeros((B, 1), dtype=np.int64),
        node_mask=np.zeros((B, 1)), active=[[]] * B,
        obs_labels=r.integers(0, C, size=(B, n)), target_actions=r.integers(0, C, size=(B, M)),
        target_durations=r.dirichlet(np.ones(M), size=B))
    batch.obs_mask[0, -1] = 0.0  # one padded frame
    bundle = PredictionBundle(ag.Tensor(r.normal(size=(B, n, C)), requires_grad=True),
                              ag.Tensor(r.normal(size=(B, M, C)), requires_grad=True),
                              ag.Tensor(r.dirichlet(np.ones(M), size=B), requires_grad=True))
    return bundle, batch


def onehot_logits(ids, C, margin):
    out = np.zeros(ids.shape + (C,))
    np.put_along_axis(out, ids[..., None], margin, axis=-1)
    return out


# --------------------------------------------------------------------- loss
def test_loss_matches_scalar_oracle():
    for seed in range(10):
        bundle, batch = make_case(seed)
        w = metrics.LossWeights(0.7, 1.3, 10.0)
        total, parts = metrics.loss(bundle, batch, w)
        ref = loss_loops(bundle.a_obs.data, batch.obs_labels, batch.obs_mask, bundle.a_pred.data,
                         batch.target_actions, bundle.d_pred.data, batch.target_durations, 0.7, 1.3, 10.0)
        assert abs(total.item() - ref) <= 1e-10
        assert set(parts) == {"obs", "act", "dur"}


def test_loss_perfect_prediction_near_zero():
    bundle, batch = make_case(0)
    perfect = PredictionBundle(ag.Tensor(onehot_logits(batch.obs_labels, 5, 20.0)),
                               ag.Tensor(onehot_logits(batch.target_actions, 5, 20.0)),
                               ag.Tensor(batch.target_durations.copy()))
    assert metrics.loss(perfect, batch)[0].item() < 1e-6


def test_loss_uniform_logits_give_log_c():
    bundle, batch = make_case(1)
    uniform = PredictionBundle(ag.Tensor(np.zeros((2, 4, 5))), ag.Tensor(np.zeros((2, 3, 5))),
                               ag.Tensor(batch.target_durations.copy()))
    _, parts = metrics.loss(uniform, batch)
    assert abs(parts["obs"] - math.log(5)) < 1e-12 and abs(parts["act"] - math.log(5)) < 1e-12


def test_loss_decreases_along_convex_path():
    bundle, batch = make_case(2)
    target_obs = onehot_logits(batch.obs_labels, 5, 20.0)
    target_act = onehot_logits(batch.target_actions, 5, 20.0)
    values = []
    for t in np.linspace(0, 1, 11):
        b = PredictionBundle(ag.Tensor((1 - t) * bundle.a_obs.data + t * target_obs),
                             ag.Tensor((1 - t) * bundle.a_pred.data + t * target_act),
                             ag.Tensor((1 - t) * bundle.d_pred.data + t * batch.target_durations))
        values.append(metrics.loss(b, batch)[0].item())
    assert all(b <= a + 1e-12 for a, b in zip(values, values[1:]))
    assert values[-1] < 1e-6


def test_loss_contract_errors():
    bundle, batch = make_case(3)
    batch.target_actions = batch.target_actions[:, :2]
    with pytest.raises(ag.ContractError):
        metrics.loss(bundle, batch)
    batch.target_actions = None
    with pytest.raises(ag.ContractError):
        metrics.loss(bundle, batch)
    with pytest.raises(ValueError):
        metrics.LossWeights(0, 0, 0)


# ---------------------------------------------------------------------- MoC
def test_moc_examples():
    assert metrics.moc_accuracy([1, 2, 2], [1, 2, 2]) == 1.0
    assert metrics.moc_accuracy([0, 0, 0, 0], [0, 0, 1, 1]) == 0.5
    with pytest.raises(ag.ContractError):
        metrics.moc_accuracy([], [])
    with pytest.raises(ag.ContractError):
        metrics.moc_accuracy([1, 2], [1])


def test_moc_counting_oracle_and_permutation():
    r = np.random.default_rng(0)
    for _ in range(100):
        true = r.integers(0, 6, size=200)
        pred = np.where(r.random(200) < 0.6, true, r.integers(0, 6, size=200))
        got = metrics.moc_accuracy(pred, true)
        assert got == moc_counting(pred.tolist(), true.tolist())
        perm = r.permutation(6)
        assert metrics.moc_accuracy(perm[pred], perm[true]) == pytest.approx(got, abs=1e-15)


# ------------------------------------------------------------ edit distance
def test_edit_distance_examples():
    assert metrics.edit_distance([1, 2, 3], [1, 2, 3]) == 0
    assert metrics.edit_distance([], [4, 5, 6]) == 3
    assert metrics.edit_distance([1, 2], [1, 3, 2]) == 1


def test_edit_distance_dp_oracle():
    r = np.random.default_rng(1)
    for _ in range(500):
        a = r.integers(0, 5, size=r.integers(0, 15)).tolist()
        b = r.integers(0, 5, size=r.integers(0, 15)).tolist()
        assert metrics.edit_distance(a, b) == levenshtein_table(a, b)


def test_edit_distance_metric_axioms():
    r = np.random.default_rng(2)
    for _ in range(200):
        x, y, z = (r.integers(0, 4, size=r.integers(0, 10)).tolist() for _ in range(3))
        dxy = metrics.edit_distance(x, y)
        assert dxy == metrics.edit_distance(y, x)
        assert (dxy == 0) == (x == y)
        assert metrics.edit_distance(x, z) <= dxy + metrics.edit_distance(y, z)


# --------------------------------------------------------------- next action
def test_next_action():
    assert metrics.next_action_hit([3, 1], [3, 2]) == 1
    assert metrics.next_action_hit([1, 3], [3, 1]) == 0
    assert metrics.next_action_hit([], [3]) == 0
    with pytest.raises(ag.ContractError):
        metrics.next_action_hit([1], [])
    r = np.random.default_rng(3)
    pairs = [(r.integers(0, 3, size=3).tolist(), r.integers(0, 3, size=2).tolist()) for _ in range(50)]
    assert metrics.next_action_accuracy(pairs) == sum(int(p[0] == t[0]) for p, t in pairs) / 50


# --------------------------------------------------------------- evaluation
def oracle_predictor(eps, wins, horizons):
    return [ep.labels[w.n_obs:w.n_obs + h] for ep, w, h in zip(eps, wins, horizons)]


def test_perfect_predictor(episodes):
    rep, _ = metrics.evaluate(oracle_predictor, {"test": episodes}, n_classes=13)
    assert all(v == 100.0 for v in rep.moc.values())
    assert all(v == 0.0 for v in rep.edit.values())
    assert all(v == 100.0 for v in rep.next_action.values())
    assert sorted(rep.moc) == [(a, b) for a in metrics.DEFAULT_ALPHAS for b in metrics.DEFAULT_BETAS]


def test_constant_predictor_on_balanced_two_class():
    labels = np.array([1] * 50 + [2] * 50)
    ep = D.EpisodeSample("e", np.zeros((100, 4), dtype=np.float32), labels, [()] * 100, "x", 0)
    const = lambda eps, wins, hs: [np.ones(h, dtype=np.int64) for h in hs]  # noqa: E731
    rep, _ = metrics.evaluate(const, {"t": [ep]}, alphas=(0.01,), betas=(0.98,), beta_model=0.98, n_classes=3)
    true = labels[1:99]
    assert rep.moc[(0.01, 0.98)] == pytest.approx(100 * moc_counting([1] * 98, true.tolist()))
    assert metrics.moc_accuracy(np.ones(100, dtype=int), labels) == 0.5


def pooled_moc(records):
    correct, total = {}, {}
    for r in records:
        for p, t in zip(r["pred"], r["true"]):
            total[t] = total.get(t, 0) + 1
            correct[t] = correct.get(t, 0) + int(p == t)
    return 100 * sum(correct[c] / total[c] for c in total) / len(total)


def test_report_recomputed_from_records(episodes):
    r = np.random.default_rng(4)

    def noisy(eps, wins, horizons):
        out = []
        for ep, w, h in zip(eps, wins, horizons):
            y = ep.labels[w.n_obs:w.n_obs + h].copy()
            flip = r.random(h) < 0.3
            y[flip] = r.integers(0, 13, size=int(flip.sum()))
            out.append(y)
        return out

    rep, records = metrics.evaluate(noisy, {"a": episodes[:6], "b": episodes[6:]}, n_classes=13)
    records = json.loads(json.dumps(records))  # as dumped
    for (a, b), moc in rep.moc.items():
        per_split = []
        for split in ("a", "b"):
            rows = [x for x in records if x["split"] == split and x["alpha"] == a and x["beta"] == b]
            per_split.append(pooled_moc(rows))
            dists = [levenshtein_table([s for s, _ in run_length(x["pred"])], [s for s, _ in run_length(x["true"])])
                     for x in rows]
            assert rep.per_split[split].edit[(a, b)] == pytest.approx(np.mean(dists), abs=1e-12)
        assert moc == pytest.approx(np.mean(per_split), abs=1e-9)
    again = metrics.report_from_records([x for x in records if x["split"] == "a"])
    assert again.moc == rep.per_split["a"].moc and again.next_action == rep.per_split["a"].next_action


def test_skipped_windows_counted():
    ep = D.EpisodeSample("s", np.zeros((4, 2), dtype=np.float32), np.array([1, 1, 2, 2]), [()] * 4, "x", 0)
    rep, records = metrics.evaluate(oracle_predictor, {"t": [ep]}, alphas=(0.6,), betas=(0.5,), n_classes=3)
    assert rep.skipped == 1 and records == []


def test_report_rendering(episodes):
    rep, _ = metrics.evaluate(oracle_predictor, {"test": episodes[:3]}, n_classes=13)
    text = rep.table("demo")
    assert "5-10" in text and "next@5" in text and "100.00" in text
    body = json.loads(rep.to_json())
    assert len(body["grid"]) == 8 and body["splits"]["test"]
