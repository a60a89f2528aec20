"""Training loss and the anticipation metrics (MoC, segment edit distance, next action)."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from . import kernels
from .data import WindowError, segments_from_labels, window

log = logging.getLogger(__name__)

DEFAULT_ALPHAS = (0.05, 0.10)
DEFAULT_BETAS = (0.10, 0.20, 0.30, 0.50)


@dataclass
class LossWeights:
    obs: float = 1.0
    act: float = 1.0
    dur: float = 10.0

    def __post_init__(self):
        if min(self.obs, self.act, self.dur) < 0 or max(self.obs, self.act, self.dur) <= 0:
            raise ValueError(f"loss weights must be nonnegative with one positive: {self}")


def loss(bundle, batch, weights=None):
    """obs * CE(observed frames) + act * CE(queries vs padded targets) + dur * |d - d_true|^2.

    Returns (total, parts) with ``parts`` the three unweighted terms as floats.
    """
    w = weights or LossWeights()
    if batch.target_actions is None:
        raise ag.ContractError("batch was prepared without targets")
    if bundle.a_pred.shape[:2] != batch.target_actions.shape:
        raise ag.ContractError(
            f"query/target length mismatch: {bundle.a_pred.shape[:2]} vs {batch.target_actions.shape}")
    ce_obs = ag.cross_entropy(bundle.a_obs, batch.obs_labels, batch.obs_mask)
    ce_act = ag.cross_entropy(bundle.a_pred, batch.target_actions)
    diff = ag.sub(bundle.d_pred, batch.target_durations)
    l2 = ag.mul(ag.sum_(ag.mul(diff, diff)), 1.0 / diff.shape[0])
    total = ag.add(ag.add(ag.mul(ce_obs, w.obs), ag.mul(ce_act, w.act)), ag.mul(l2, w.dur))
    return total, {"obs": ce_obs.item(), "act": ce_act.item(), "dur": l2.item()}


def class_counts(pred, true, n_classes=None):
    pred = np.asarray(pred, dtype=np.int64)
    true = np.asarray(true, dtype=np.int64)
    n = int(max(pred.max(initial=0), true.max(initial=0)) + 1) if n_classes is None else n_classes
    total = np.bincount(true, minlength=n)
    correct = np.bincount(true[pred == true], minlength=n)
    return correct, total


def moc_from_counts(correct, total):
    present = total > 0
    return float(np.mean(correct[present] / total[present]))


def moc_accuracy(pred_frames, true_frames, class_count=None):
    """Mean over ground-truth classes of per-class frame recall, in [0, 1]."""
    pred_frames = np.asarray(pred_frames)
    true_frames = np.asarray(true_frames)
    if true_frames.size == 0 or pred_frames.shape != true_frames.shape:
        raise ag.ContractError(f"moc needs equal nonempty lengths, got {pred_frames.shape} and {true_frames.shape}")
    return moc_from_counts(*class_counts(pred_frames, true_frames, class_count))


def edit_distance(pred_seq, true_seq):
    """Levenshtein distance with unit add/delete/substitute costs."""
    return kernels.levenshtein(pred_seq, true_seq)


def segment_sequence(frames):
    return [a for a, _ in segments_from_labels(frames)]


def next_action_hit(pred_seq, true_seq):
    if len(true_seq) == 0:
        raise ag.ContractError("next-action accuracy needs a nonempty ground-truth sequence")
    return int(len(pred_seq) > 0 and pred_seq[0] == true_seq[0])


def next_action_accuracy(pairs):
    """Mean of per-sample next-action indicators over (pred_seq, true_seq) pairs."""
    hits = [next_action_hit(p, t) for p, t in pairs]
    return float(np.mean(hits)) if hits else float("nan")


# -------------------------------------------------------------- evaluation
@dataclass
class EvalReport:
    moc: dict = field(default_factory=dict)  # (alpha, beta) -> percent
    edit: dict = field(default_factory=dict)  # (alpha, beta) -> mean raw distance
    edit_norm: dict = field(default_factory=dict)  # (alpha, beta) -> mean distance / max length
    next_action: dict = field(default_factory=dict)  # alpha -> percent
    per_split: dict = field(default_factory=dict)  # split name -> EvalReport
    skipped: int = 0

    def grid(self):
        return sorted(self.moc)

    def records(self):
        out = []
        for a, b in self.grid():
            out.append({"alpha": a, "beta": b, "moc": self.moc[(a, b)], "edit": self.edit[(a, b)],
                        "edit_norm": self.edit_norm[(a, b)], "next_action": self.next_action.get(a)})
        return out

    def to_json(self):
        body = {"grid": self.records(), "skipped": self.skipped,
                "splits": {k: v.records() for k, v in self.per_split.items()}}
        return json.dumps(body, indent=2, sort_keys=True)

    def table(self, title="synthetic"):
        grid = self.grid()
        heads = [f"{round(a * 100):g}-{round(b * 100):g}" for a, b in grid]
        alphas = sorted(self.next_action)
        cells = [f"{self.moc[g]:6.2f} / {self.edit[g]:5.2f} ({self.edit_norm[g]:.2f})" for g in grid]
        width = max([len(c) for c in cells] + [len(h) for h in heads])
        lines = [f"{title}: MoC % (higher better) / edit distance (lower better) (length-normalised)"]
        lines.append("  ".join(h.rjust(width) for h in heads) + " | " +
                     "  ".join(f"next@{round(a * 100):g}".rjust(8) for a in alphas))
        lines.append("  ".join(c.rjust(width) for c in cells) + " | " +
                     "  ".join(f"{self.next_action[a]:8.2f}" for a in alphas))
        return "\n".join(lines)


def _score(records, alphas, betas):
    rep = EvalReport()
    for a in alphas:
        hits = []
        for b in betas:
            rows = [r for r in records if r["alpha"] == a and r["beta"] == b]
            if not rows:
                continue
            correct = total = 0
            dists, norms = [], []
            for r in rows:
                c, t = class_counts(r["pred"], r["true"], r["n_classes"])
                correct = correct + c
                total = total + t
                ps, ts = segment_sequence(r["pred"]), segment_sequence(r["true"])
                d = edit_distance(ps, ts)
                dists.append(d)
                norms.append(d / max(len(ps), len(ts)))
            rep.moc[(a, b)] = 100.0 * moc_from_counts(correct, total)
            rep.edit[(a, b)] = float(np.mean(dists))
            rep.edit_norm[(a, b)] = float(np.mean(norms))
        for r in records:
            if r["alpha"] == a and r["beta"] == max(betas):
                hits.append(next_action_hit(segment_sequence(r["pred"]), segment_sequence(r["true"])))
        if hits:
            rep.next_action[a] = 100.0 * float(np.mean(hits))
    return rep


def report_from_records(records, alphas=None, betas=None):
    """Score raw per-episode prediction records (also the recomputation path for dumps)."""
    alphas = sorted({r["alpha"] for r in records}) if alphas is None else alphas
    betas = sorted({r["beta"] for r in records}) if betas is None else betas
    return _score(records, alphas, betas)


def collect_predictions(predict_fn, episodes, alphas, betas, beta_model, n_classes):
    """Run ``predict_fn(episodes, windows, horizons)`` once per alpha.

    The model horizon is ``beta_model`` of the episode; shorter horizons are
    read off its prefix.  Windows that do not fit an episode are skipped.
    """
    records, skipped = [], 0
    for a in alphas:
        eps, wins = [], []
        for ep in episodes:
            try:
                wins.append(window(ep, a, max(beta_model, max(betas))))
                eps.append(ep)
            except WindowError:
                skipped += 1
        if not eps:
            continue
        preds = predict_fn(eps, wins, [w.horizon for w in wins])
        for ep, win, pred in zip(eps, wins, preds):
            for b in betas:
                try:
                    w = window(ep, a, b)
                except WindowError:
                    skipped += 1
                    continue
                true = ep.labels[w.n_obs:w.n_obs + w.horizon]
                records.append({"episode": ep.id, "alpha": a, "beta": b, "n_classes": n_classes,
                                "pred": np.asarray(pred[:w.horizon]).tolist(), "true": true.tolist()})
    if skipped:
        log.info("skipped %d windows that did not fit their episode", skipped)
    return records, skipped


def evaluate(predictor, splits, alphas=DEFAULT_ALPHAS, betas=DEFAULT_BETAS, beta_model=0.5,
             n_classes=None, batch_size=64, force_identity=False):
    """Score a model (or a ``predict_fn``) on each split and average over splits.

    ``splits`` maps a split name to its list of test episodes.  Returns the
    averaged :class:`EvalReport` and the raw prediction records.
    """
    if hasattr(predictor, "predict"):
        model = predictor
        n_classes = model.cfg.n_classes

        def predict_fn(eps, wins, horizons):
            out = []
            for i in range(0, len(eps), batch_size):
                frames, _, _ = model.predict(eps[i:i + batch_size], wins[i:i + batch_size],
                                             horizons[i:i + batch_size], force_identity=force_identity)
                out.extend(frames)
            return out
    else:
        predict_fn = predictor
    all_records = []
    reports = {}
    skipped = 0
    for name, episodes in splits.items():
        records, sk = collect_predictions(predict_fn, episodes, alphas, betas, beta_model, n_classes)
        for r in records:
            r["split"] = name
        all_records.extend(records)
        reports[name] = report_from_records(records, alphas, betas)
        skipped += sk
    rep = average_reports(reports)
    rep.skipped = skipped
    return rep, all_records


def average_reports(reports):
    rep = EvalReport(per_split=dict(reports))
    parts = list(reports.values())
    for attr in ("moc", "edit", "edit_norm", "next_action"):
        keys = sorted(set().union(*(getattr(p, attr).keys() for p in parts)))
        for k in keys:
            vals = [getattr(p, attr)[k] for p in parts if k in getattr(p, attr)]
            getattr(rep, attr)[k] = float(np.mean(vals))
    return rep
