import numpy as np
import pytest

from kgant import data as D
from oracles import grammar_regex, run_length

GRAMMAR_TEXT = """
objects: [bowl, egg, pan]
episode_length: [5, 40]
actions:
  take_bowl: {objects: [bowl], duration: [2, 4]}
  crack_egg: {objects: [egg, bowl], duration: [3, 5]}
  fry_egg: {objects: [egg, pan], duration: [4, 6]}
activities:
  fry: [take_bowl, crack_egg, {optional: fry_egg}]
"""


# ------------------------------------------------------------------ grammar
def test_default_grammar_shape(grammar, graph):
    assert len(grammar.activities) == 4
    assert len(grammar.actions) == 12
    assert len(grammar.objects) == 10
    assert grammar.class_names[0] == "none" and grammar.n_classes == 13
    grammar.validate(graph)


@pytest.mark.parametrize("edit,pattern", [
    (lambda t: t.replace("objects: [egg, pan]", "objects: [egg, wok]"), "unknown object"),
    (lambda t: t.replace("duration: [2, 4]", "duration: [0, 4]"), "bad duration"),
    (lambda t: t.replace("fry: [take_bowl", "fry: [take_plate"), "unknown action"),
    (lambda t: t.replace("take_bowl: {", "none: {"), "reserved"),
    (lambda t: t.replace("activities:", "activitiez:"), "missing"),
    (lambda t: t + "\n  broken: [", "YAML"),
])
def test_grammar_errors(edit, pattern):
    with pytest.raises(D.GrammarError, match=pattern):
        D.parse_grammar(edit(GRAMMAR_TEXT))


def test_grammar_objects_must_be_graph_objects(graph):
    g = D.parse_grammar(GRAMMAR_TEXT.replace("[bowl, egg, pan]", "[bowl, egg, pan, toaster]"))
    with pytest.raises(D.GrammarError, match="toaster"):
        g.validate(graph)


def test_grammar_hash_tracks_content(tmp_path):
    p = tmp_path / "g.yaml"
    p.write_text(GRAMMAR_TEXT)
    h1 = D.grammar_hash(p)
    p.write_text(GRAMMAR_TEXT)
    assert D.grammar_hash(p) == h1
    p.write_text(GRAMMAR_TEXT.replace("[3, 5]", "[3, 6]"))
    assert D.grammar_hash(p) != h1


# --------------------------------------------------------------- generation
def test_generate_deterministic(grammar):
    a = D.generate(grammar, 5, seed=11)
    b = D.generate(grammar, 5, seed=11)
    c = D.generate(grammar, 5, seed=12)
    for x, y in zip(a, b):
        assert x.frames.tobytes() == y.frames.tobytes()
        assert x.labels.tobytes() == y.labels.tobytes() and x.scenes == y.scenes
    assert any(x.frames.shape != z.frames.shape or not np.array_equal(x.frames, z.frames) for x, z in zip(a, c))


def test_generate_rejects_zero_episodes(grammar):
    with pytest.raises(ValueError):
        D.generate(grammar, 0, seed=0)


def test_noise_free_frames_equal_per_label(grammar):
    for ep in D.generate(grammar, 10, seed=4, cfg=D.GenConfig(noise_sigma=0.0)):
        for c in np.unique(ep.labels):
            rows = ep.frames[ep.labels == c]
            assert np.all(rows == rows[0])


def test_episodes_follow_grammar(grammar, graph):
    eps = D.generate(grammar, 1000, seed=5, graph=graph)
    patterns = {name: grammar_regex(grammar, name) for name in grammar.activities}
    lo, hi = grammar.episode_length
    for ep in eps:
        assert lo <= ep.n_frames <= hi
        regex, code = patterns[ep.activity]
        segs = run_length(ep.labels.tolist())
        word = "".join(code[grammar.class_names[a]] for a, _ in segs)
        assert regex.fullmatch(word), (ep.id, word)
        for a, n in segs:
            dmin, dmax = grammar.action(a).duration
            assert dmin <= n <= dmax
        for lab, scene in zip(ep.labels, ep.scenes):
            assert set(grammar.action(int(lab)).objects) <= set(scene)


def test_future_objects_visible_in_observed_scene(grammar):
    for ep in D.generate(grammar, 50, seed=6):
        win = D.window(ep, 0.05, 0.5)
        seen = set(ep.scenes[win.n_obs - 1])
        for a, _ in D.segments_from_labels(ep.labels[win.n_obs:win.n_obs + win.horizon]):
            assert set(grammar.action(a).objects) <= seen


def test_feature_layout(grammar):
    cfg = D.GenConfig(noise_sigma=0.0)
    ep = D.generate(grammar, 1, seed=0, cfg=cfg)[0]
    hot = ep.frames[:, -len(grammar.objects):]
    for t in (0, ep.n_frames - 1):
        used = grammar.action(int(ep.labels[t])).objects
        assert {grammar.objects[i] for i in np.flatnonzero(hot[t])} == set(used)


# ------------------------------------------------------------------ windows
def test_window_examples():
    w = D.window(100, 0.10, 0.30)
    assert list(w.observed) == list(range(0, 10)) and list(w.target) == list(range(10, 40))
    w = D.window(100, 0.05, 0.50)
    assert (w.observed.stop, w.target.start, w.target.stop) == (5, 5, 55)
    w = D.window(97, 0.10, 0.20)
    assert (w.n_obs, w.horizon) == (10, 20)


def test_window_errors():
    with pytest.raises(D.WindowError):
        D.window(10, 0.5, 0.6)
    with pytest.raises(D.WindowError):
        D.window(10, 0.0, 0.5)


def test_window_accepts_episode(episodes):
    ep = episodes[0]
    assert D.window(ep, 0.1, 0.3) == D.window(ep.n_frames, 0.1, 0.3)


def test_segments_examples_and_round_trip():
    assert D.segments_from_labels([2, 2, 2]) == [(2, 3)]
    assert D.segments_from_labels([1, 2, 2, 3]) == [(1, 1), (2, 2), (3, 1)]
    r = np.random.default_rng(0)
    for _ in range(200):
        labels = np.repeat(r.integers(0, 4, size=20), r.integers(1, 4, size=20))
        segs = D.segments_from_labels(labels)
        assert segs == run_length(labels.tolist())
        assert np.array_equal(D.labels_from_segments(segs), labels)


# ----------------------------------------------------------------- decoding
def onehot(ids, c=5):
    out = np.zeros((len(ids), c))
    out[np.arange(len(ids)), ids] = 1.0
    return out


def test_decode_examples():
    assert D.decode_durations([0.5, 0.5], onehot([1, 2]), 30).tolist() == [1] * 15 + [2] * 15
    assert D.decode_durations([1.0], onehot([3]), 7).tolist() == [3] * 7
    out = D.decode_durations([0.34, 0.33, 0.33], onehot([1, 2, 3]), 10)
    assert D.segments_from_labels(out) == [(1, 4), (2, 3), (3, 3)]


def test_decode_truncates_at_first_none():
    out = D.decode_durations([0.3, 0.3, 0.2, 0.2], np.array([2, 0, 4, 1]), 9)
    assert out.tolist() == [2] * 9
    assert D.decode_durations([0.6, 0.4], np.array([0, 3]), 5).tolist() == [0] * 5


def test_decode_rejects_empty_horizon():
    with pytest.raises(D.WindowError):
        D.decode_durations([1.0], np.array([1]), 0)


def test_apportion_largest_remainder():
    assert D.apportion([1, 1, 1], 10).tolist() == [4, 3, 3]  # tie -> lower index
    assert D.apportion([0.1, 0.2, 0.7], 10).tolist() == [1, 2, 7]
    assert D.apportion([0.15, 0.85], 10).tolist() == [2, 8]  # 1.5 / 8.5: equal remainders


def test_window_targets_positional(episodes):
    ep = episodes[0]
    win = D.window(ep, 0.1, 0.5)
    acts, durs = D.window_targets(ep, win, 8)
    segs = D.segments_from_labels(ep.labels[win.n_obs:win.n_obs + win.horizon])
    assert acts[:len(segs)].tolist() == [a for a, _ in segs]
    assert np.all(acts[len(segs):] == D.NONE_ID) and np.all(durs[len(segs):] == 0)
    assert abs(durs.sum() - 1.0) < 1e-12
    with pytest.raises(D.WindowError):
        D.window_targets(ep, win, len(segs))


# ------------------------------------------------------------------ files
def test_dataset_round_trip(tmp_path, episodes):
    ids = [e.id for e in episodes]
    manifest = {"seed": 3}
    D.write_dataset(tmp_path / "a", episodes, {"train": ids[:8], "test": ids[8:]}, manifest)
    D.write_dataset(tmp_path / "b", episodes, {"train": ids[:8], "test": ids[8:]}, manifest)
    for f in sorted((tmp_path / "a").rglob("*")):
        if f.is_file():
            assert f.read_bytes() == (tmp_path / "b" / f.relative_to(tmp_path / "a")).read_bytes()
    ds = D.read_dataset(tmp_path / "a")
    assert ds.splits == {"train": ids[:8], "test": ids[8:]} and ds.manifest == manifest
    for ep in episodes:
        back = ds.episodes[ep.id]
        assert np.array_equal(back.frames, ep.frames) and back.frames.dtype == np.float32
        assert np.array_equal(back.labels, ep.labels)
        assert back.scenes == ep.scenes and back.activity == ep.activity and back.seed == ep.seed


def test_dataset_errors(tmp_path, episodes):
    with pytest.raises(D.DatasetError, match="index"):
        D.read_dataset(tmp_path)
    D.write_dataset(tmp_path / "d", episodes[:1], {"train": [episodes[0].id]}, {})
    feat = tmp_path / "d" / "episodes" / f"{episodes[0].id}.features.bin"
    feat.write_bytes(feat.read_bytes()[:-8])
    with pytest.raises(D.DatasetError, match="payload"):
        D.read_dataset(tmp_path / "d")
    feat.write_bytes(b"JUNK" + feat.read_bytes()[4:])
    with pytest.raises(D.DatasetError, match="header"):
        D.read_dataset(tmp_path / "d")


def test_i3d_loader_is_a_stub():
    with pytest.raises(NotImplementedError):
        D.load_i3d_features("features.npy")
