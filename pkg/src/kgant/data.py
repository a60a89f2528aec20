"""Synthetic kitchen episodes, observation/prediction windows, dataset files.

Frame features are ``[action prototype | in-use object multi-hot] + noise``.
The per-frame *scene* lists every object on the counter: those needed by
the current action and by every later action of the episode, plus random
distractors.  Frame features only see the objects in use, so at short
observation the scene is the only cue about what comes next.
"""
from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

NONE_ACTION = "none"
NONE_ID = 0


class GrammarError(ValueError):
    pass


class WindowError(ValueError):
    """Requested observation/prediction window does not fit the episode."""


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class Action:
    name: str
    objects: tuple
    duration: tuple  # (min, max) frames, inclusive


@dataclass
class ActionGrammar:
    objects: list
    actions: list  # Action, class id = position + 1 (0 is "none")
    activities: dict  # name -> template (list of items)
    episode_length: tuple = (1, 10 ** 9)

    def __post_init__(self):
        self.action_ids = {a.name: i + 1 for i, a in enumerate(self.actions)}

    @property
    def class_names(self):
        return [NONE_ACTION] + [a.name for a in self.actions]

    @property
    def n_classes(self):
        return len(self.actions) + 1

    def action(self, class_id):
        return self.actions[class_id - 1]

    def validate(self, graph=None):
        known = set(self.objects)
        if graph is not None:
            graph_objects = {n.name for n in graph.objects()}
            missing = known - graph_objects
            if missing:
                raise GrammarError(f"grammar objects not in knowledge graph: {sorted(missing)}")
        for a in self.actions:
            lo, hi = a.duration
            if lo < 1 or hi < lo:
                raise GrammarError(f"action {a.name!r}: bad duration range {a.duration}")
            for o in a.objects:
                if o not in known:
                    raise GrammarError(f"action {a.name!r} uses unknown object {o!r}")
        for name, template in self.activities.items():
            for act in _template_actions(template):
                if act not in self.action_ids:
                    raise GrammarError(f"activity {name!r} references unknown action {act!r}")
        return self


def _template_actions(items):
    for item in items:
        if isinstance(item, str):
            yield item
        elif isinstance(item, dict) and "any" in item:
            for alt in item["any"]:
                yield from _template_actions([alt] if isinstance(alt, str) else alt)
        elif isinstance(item, dict) and "optional" in item:
            opt = item["optional"]
            yield from _template_actions([opt] if isinstance(opt, str) else opt)
        else:
            raise GrammarError(f"bad template item {item!r}")


def parse_grammar(text):
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise GrammarError(f"grammar is not valid YAML: {exc}") from exc
    if not isinstance(raw, dict):
        raise GrammarError("grammar must be a mapping")
    for key in ("objects", "actions", "activities"):
        if key not in raw:
            raise GrammarError(f"grammar missing {key!r}")
    actions = []
    for name, spec in raw["actions"].items():
        if name == NONE_ACTION:
            raise GrammarError(f"action name {NONE_ACTION!r} is reserved")
        try:
            actions.append(Action(name, tuple(spec["objects"]), tuple(int(v) for v in spec["duration"])))
        except (KeyError, TypeError, ValueError) as exc:
            raise GrammarError(f"action {name!r}: needs 'objects' and 'duration: [min, max]'") from exc
    activities = {}
    for name, template in raw["activities"].items():
        activities[name] = list(template)
        list(_template_actions(activities[name]))
    length = tuple(raw.get("episode_length", (1, 10 ** 9)))
    return ActionGrammar(list(raw["objects"]), actions, activities, length).validate()


def load_grammar(path):
    with open(path, encoding="utf-8") as fh:
        return parse_grammar(fh.read())


def default_resource(name):
    return Path(__file__).with_name("resources") / name


def grammar_hash(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ---------------------------------------------------------------- sampling
def sample_chain(grammar, activity, rng):
    chain = []

    def walk(items):
        for item in items:
            if isinstance(item, str):
                chain.append(item)
            elif "any" in item:
                alt = item["any"][rng.integers(len(item["any"]))]
                walk([alt] if isinstance(alt, str) else alt)
            else:
                if rng.random() < 0.5:
                    opt = item["optional"]
                    walk([opt] if isinstance(opt, str) else opt)

    walk(grammar.activities[activity])
    return chain


@dataclass
class GenConfig:
    feature_dim: int = 64
    noise_sigma: float = 0.5
    distractor_rate: float = 0.1
    clutter_gain: float = 0.0  # feature weight of a glimpsed visible-but-unused object
    glimpse_rate: float = 0.0  # per-frame probability that such an object is glimpsed
    max_attempts: int = 1000


@dataclass
class EpisodeSample:
    id: str
    frames: np.ndarray  # (N, F) float32
    labels: np.ndarray  # (N,) int64 class ids
    scenes: list  # per-frame tuple of visible object names (sorted)
    activity: str
    seed: int

    @property
    def n_frames(self):
        return len(self.labels)


def action_prototypes(grammar, feature_dim, seed):
    n_obj = len(grammar.objects)
    if feature_dim <= n_obj:
        raise GrammarError(f"feature_dim {feature_dim} must exceed object count {n_obj}")
    rng = np.random.default_rng([seed, 7])
    return rng.normal(0.0, 1.0, size=(grammar.n_classes, feature_dim - n_obj))


def episode_seed(seed, index):
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def generate_episode(grammar, protos, ep_id, ep_seed, cfg):
    rng = np.random.default_rng(ep_seed)
    names = sorted(grammar.activities)
    activity = names[rng.integers(len(names))]
    lo, hi = grammar.episode_length
    for _ in range(cfg.max_attempts):
        chain = sample_chain(grammar, activity, rng)
        durs = [int(rng.integers(grammar.action(grammar.action_ids[a]).duration[0],
                                 grammar.action(grammar.action_ids[a]).duration[1] + 1)) for a in chain]
        if lo <= sum(durs) <= hi:
            break
    else:
        raise GrammarError(f"activity {activity!r} cannot produce an episode within {grammar.episode_length}")
    obj_index = {o: i for i, o in enumerate(grammar.objects)}
    distractors = {o for o in grammar.objects if rng.random() < cfg.distractor_rate}
    n = sum(durs)
    n_obj = len(grammar.objects)
    labels = np.empty(n, dtype=np.int64)
    frames = np.empty((n, protos.shape[1] + n_obj))
    scenes = []
    pos = 0
    for k, (act, d) in enumerate(zip(chain, durs)):
        cid = grammar.action_ids[act]
        used = grammar.action(cid).objects
        visible = set(distractors)
        for later in chain[k:]:
            visible.update(grammar.action(grammar.action_ids[later]).objects)
        hot = np.zeros((d, n_obj))
        for o in sorted(visible):
            hot[:, obj_index[o]] = cfg.clutter_gain * (rng.random(d) < cfg.glimpse_rate)
        for o in used:
            hot[:, obj_index[o]] = 1.0
        labels[pos:pos + d] = cid
        frames[pos:pos + d, :protos.shape[1]] = protos[cid]
        frames[pos:pos + d, protos.shape[1]:] = hot
        scenes.extend([tuple(sorted(visible))] * d)
        pos += d
    if cfg.noise_sigma > 0:
        frames += rng.normal(0.0, cfg.noise_sigma, size=frames.shape)
    return EpisodeSample(ep_id, frames.astype(np.float32), labels, scenes, activity, ep_seed)


def generate(grammar, n_episodes, seed, cfg=None, graph=None):
    """Sample ``n_episodes`` episodes; identical seeds give identical output."""
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    cfg = cfg or GenConfig()
    grammar.validate(graph)
    protos = action_prototypes(grammar, cfg.feature_dim, seed)
    return [generate_episode(grammar, protos, f"ep{i:05d}", episode_seed(seed, i), cfg)
            for i in range(n_episodes)]


# ---------------------------------------------------------------- windows
@dataclass(frozen=True)
class EpisodeWindow:
    n_frames: int
    n_obs: int
    horizon: int
    alpha: float
    beta: float

    @property
    def observed(self):
        return range(0, self.n_obs)

    @property
    def target(self):
        return range(self.n_obs, self.n_obs + self.horizon)


def ceil_frac(frac, n):
    return int(math.ceil(round(frac * n, 9)))


def window(n_frames, alpha, beta):
    """Observe the first ceil(alpha*N) frames, predict the next ceil(beta*N).

    ``alpha`` and ``beta`` are fractions (0.1 for 10%).  ``n_frames`` may
    also be an :class:`EpisodeSample`.
    """
    if isinstance(n_frames, EpisodeSample):
        n_frames = n_frames.n_frames
    if not (alpha > 0 and beta > 0):
        raise WindowError(f"alpha and beta must be positive, got {alpha}, {beta}")
    n_obs = ceil_frac(alpha, n_frames)
    horizon = ceil_frac(beta, n_frames)
    if n_obs + horizon > n_frames:
        raise WindowError(
            f"window {n_obs}+{horizon} frames exceeds episode of {n_frames} (alpha={alpha}, beta={beta})")
    return EpisodeWindow(n_frames, n_obs, horizon, alpha, beta)


def segments_from_labels(labels):
    """Run-length encode: [1,2,2,3] -> [(1,1), (2,2), (3,1)]."""
    labels = np.asarray(labels)
    if labels.size == 0:
        return []
    cut = np.flatnonzero(labels[1:] != labels[:-1]) + 1
    starts = np.concatenate([[0], cut])
    lengths = np.diff(np.concatenate([starts, [labels.size]]))
    return [(int(labels[s]), int(n)) for s, n in zip(starts, lengths)]


def labels_from_segments(segments):
    if not segments:
        return np.zeros(0, dtype=np.int64)
    return np.concatenate([np.full(n, a, dtype=np.int64) for a, n in segments])


def apportion(shares, total):
    """Largest-remainder split of ``total`` into integer counts (ties -> lower index)."""
    shares = np.asarray(shares, dtype=np.float64)
    quotas = shares / shares.sum() * total
    counts = np.floor(quotas).astype(np.int64)
    left = total - int(counts.sum())
    order = sorted(range(len(quotas)), key=lambda i: (-(quotas[i] - counts[i]), i))
    for i in order[:left]:
        counts[i] += 1
    return counts


def decode_durations(d_pred, a_pred, horizon):
    """Turn per-query (duration share, action) predictions into ``horizon`` frame labels.

    ``a_pred`` is either per-query logits (M, C) or class ids (M,).  Queries
    from the first ``none`` onwards are dropped; the survivors' shares are
    renormalised and apportioned by largest remainder.  If every query is
    ``none`` the whole horizon is ``none``.
    """
    if horizon < 1:
        raise WindowError("horizon must be >= 1")
    a_pred = np.asarray(a_pred)
    actions = a_pred.argmax(axis=-1) if a_pred.ndim == 2 else a_pred.astype(np.int64)
    d = np.asarray(d_pred, dtype=np.float64)
    stop = np.flatnonzero(actions == NONE_ID)
    k = int(stop[0]) if stop.size else len(actions)
    if k == 0:
        return np.full(horizon, NONE_ID, dtype=np.int64)
    shares = d[:k]
    if shares.sum() <= 0:
        shares = np.ones(k)
    counts = apportion(shares, horizon)
    return np.repeat(actions[:k].astype(np.int64), counts)


def window_targets(ep, win, n_queries):
    """Positional query targets: i-th future segment per query, ``none`` beyond.

    Returns (actions (M,), duration shares (M,)) with shares summing to 1
    over the real segments.
    """
    segs = segments_from_labels(ep.labels[win.n_obs:win.n_obs + win.horizon])
    if len(segs) > n_queries - 1:
        raise WindowError(f"{len(segs)} future segments do not fit {n_queries} queries (one kept for none)")
    acts = np.full(n_queries, NONE_ID, dtype=np.int64)
    durs = np.zeros(n_queries)
    for i, (a, n) in enumerate(segs):
        acts[i] = a
        durs[i] = n / win.horizon
    return acts, durs


# ------------------------------------------------------------ dataset files
_FEAT_MAGIC = b"KGAF"


def write_features(path, arr):
    arr = np.ascontiguousarray(arr, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(_FEAT_MAGIC)
        fh.write(struct.pack("<III", arr.ndim, *arr.shape))
        fh.write(arr.tobytes())


def read_features(path):
    blob = Path(path).read_bytes()
    if blob[:4] != _FEAT_MAGIC:
        raise DatasetError(f"{path}: bad feature file header")
    ndim, n, f = struct.unpack_from("<III", blob, 4)
    if ndim != 2:
        raise DatasetError(f"{path}: expected 2-D features, header says {ndim}-D")
    arr = np.frombuffer(blob, dtype="<f4", offset=16)
    if arr.size != n * f:
        raise DatasetError(f"{path}: payload has {arr.size} values, header says {n}x{f}")
    return arr.reshape(n, f).astype(np.float32)


@dataclass
class Dataset:
    root: Path
    episodes: dict  # id -> EpisodeSample
    splits: dict = field(default_factory=dict)  # name -> list of ids
    manifest: dict = field(default_factory=dict)

    @property
    def class_names(self):
        if "classes" not in self.manifest:
            raise DatasetError(f"{self.root}: manifest does not list the action classes")
        return self.manifest["classes"]

    def split(self, name):
        return [self.episodes[i] for i in self.splits[name]]


def write_dataset(root, episodes, splits, manifest):
    root = Path(root)
    (root / "episodes").mkdir(parents=True, exist_ok=True)
    (root / "splits").mkdir(exist_ok=True)
    with open(root / "index.tsv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write("id\tN\tactivity\tseed\n")
        for ep in episodes:
            fh.write(f"{ep.id}\t{ep.n_frames}\t{ep.activity}\t{ep.seed}\n")
    for ep in episodes:
        base = root / "episodes" / ep.id
        Path(f"{base}.labels.txt").write_text(" ".join(map(str, ep.labels.tolist())) + "\n", encoding="utf-8")
        Path(f"{base}.scenes.txt").write_text("".join(" ".join(s) + "\n" for s in ep.scenes), encoding="utf-8")
        write_features(f"{base}.features.bin", ep.frames)
    for name, ids in splits.items():
        (root / "splits" / f"{name}.txt").write_text("".join(i + "\n" for i in ids), encoding="utf-8")
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def read_dataset(root):
    root = Path(root)
    index = root / "index.tsv"
    if not index.exists():
        raise DatasetError(f"{root}: no index.tsv, not a dataset directory")
    episodes = {}
    lines = index.read_text(encoding="utf-8").splitlines()
    for line in lines[1:]:
        ep_id, n, activity, seed = line.split("\t")
        base = root / "episodes" / ep_id
        labels = np.array(Path(f"{base}.labels.txt").read_text(encoding="utf-8").split(), dtype=np.int64)
        scene_lines = Path(f"{base}.scenes.txt").read_text(encoding="utf-8").split("\n")[:-1]
        scenes = [tuple(s.split()) for s in scene_lines]
        frames = read_features(f"{base}.features.bin")
        if not (len(labels) == len(scenes) == frames.shape[0] == int(n)):
            raise DatasetError(f"{ep_id}: labels/scenes/features lengths disagree with index N={n}")
        episodes[ep_id] = EpisodeSample(ep_id, frames, labels, scenes, activity, int(seed))
    splits = {}
    for f in sorted((root / "splits").glob("*.txt")):
        splits[f.stem] = f.read_text(encoding="utf-8").split()
    manifest = json.loads((root / "manifest.json").read_text(encoding="utf-8"))
    return Dataset(root, episodes, splits, manifest)


def load_i3d_features(path):
    """Placeholder for real benchmark features.

    Expected layout: one float32 array per video of shape (N_frames, 2048)
    (I3D RGB+flow, one row per sampled frame) with a parallel per-frame
    label file.  Extraction is not shipped.
    """
    raise NotImplementedError("real-video feature loading is not included; use the synthetic generator")
