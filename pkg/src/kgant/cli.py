"""Command line entry point: ``kgant <verb> [options]``.

Exit codes: 0 success, 2 usage, 3 configuration, 4 data, 5 numeric failure.
"""
from __future__ import annotations

import argparse
import contextlib
import dataclasses
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__, checkpoint
from . import config as config_mod
from . import data as D
from . import knowledge_graph as KG
from . import metrics
from .autograd import Adam, no_grad
from .model import KGAnticipator
from .train import NumericError, fit, load_training_state

log = logging.getLogger("kgant")

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4, 5


class CheckpointMismatch(config_mod.ConfigError):
    pass


def code_version():
    """Package version plus a digest of the package sources."""
    h = hashlib.sha256()
    root = Path(__file__).parent
    for p in sorted(root.rglob("*")):
        if p.is_file() and p.suffix in (".py", ".graph", ".yaml"):
            h.update(p.relative_to(root).as_posix().encode())
            h.update(p.read_bytes())
    return f"{__version__}+{h.hexdigest()[:12]}"


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def parse_fraction(text):
    """``"0.1"`` or ``"10%"`` -> 0.1."""
    s = text.strip()
    try:
        v = float(s[:-1]) / 100 if s.endswith("%") else float(s)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a fraction or percentage: {text!r}") from None
    if not 0 < v < 1:
        raise argparse.ArgumentTypeError(f"{text!r} is outside (0, 1)")
    return v


# ------------------------------------------------------------------ setup
def resolve_config(args):
    cfg = config_mod.load(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.no_kg:
        cfg.model = dataclasses.replace(cfg.model, use_kg=False)
    if args.alpha:
        cfg.eval.alphas = tuple(args.alpha)
    if args.beta:
        cfg.eval.betas = tuple(args.beta)
    if getattr(args, "run_dir", None):
        cfg.paths.run_dir = args.run_dir
    if getattr(args, "dataset", None):
        cfg.paths.dataset = args.dataset
    if getattr(args, "steps", None):
        cfg.train.steps = args.steps
    if getattr(args, "checkpoint", None):
        cfg.paths.checkpoint = args.checkpoint
    return cfg


def load_inputs(cfg, need_dataset=True):
    graph = KG.load_graph(cfg.paths.graph_path())
    grammar = D.load_grammar(cfg.paths.grammar_path()).validate(graph)
    ds = D.read_dataset(cfg.paths.dataset) if need_dataset else None
    if ds is not None and ds.class_names != grammar.class_names:
        raise D.DatasetError(f"{cfg.paths.dataset}: dataset classes do not match the configured grammar")
    return graph, grammar, ds


def build_model(cfg, graph, grammar):
    mcfg = dataclasses.replace(cfg.model, n_classes=grammar.n_classes)
    return KGAnticipator(mcfg, graph, seed=cfg.seed)


def load_weights(model, path):
    path = Path(path)
    if not path.is_file():
        raise config_mod.ConfigError(f"checkpoint {path} does not exist")
    try:
        load_training_state(path, model)
    except ValueError as exc:
        raise CheckpointMismatch(f"{path} does not fit the configured model: {exc}") from exc


def checkpoint_path(cfg):
    return Path(cfg.paths.checkpoint) if cfg.paths.checkpoint else Path(cfg.paths.run_dir) / "final.ckpt"


def run_manifest(cfg, command, **extra):
    out = {"command": command, "code_version": code_version(), "config": cfg.to_dict()}
    out.update(extra)
    return out


def _segments(labels, names):
    return [[names[a], n] for a, n in D.segments_from_labels(labels)]


# ----------------------------------------------------------------- verbs
def cmd_gen_data(cfg, args):
    graph = KG.load_graph(cfg.paths.graph_path())
    grammar = D.load_grammar(cfg.paths.grammar_path())
    n = cfg.data.n_train + cfg.data.n_test
    episodes = D.generate(grammar, n, cfg.seed, cfg.data.gen_config(), graph)
    ids = [ep.id for ep in episodes]
    manifest = {
        "seed": cfg.seed,
        "grammar_sha256": D.grammar_hash(cfg.paths.grammar_path()),
        "graph_sha256": D.grammar_hash(cfg.paths.graph_path()),
        "classes": grammar.class_names,
        "generator": dataclasses.asdict(cfg.data),
        "code_version": code_version(),
    }
    D.write_dataset(cfg.paths.dataset, episodes, {"train": ids[:cfg.data.n_train],
                                                  "test": ids[cfg.data.n_train:]}, manifest)
    log.info("wrote %d episodes to %s", n, cfg.paths.dataset)
    return EXIT_OK


def _read_curve(path, before):
    rows = []
    if not path.is_file():
        return rows
    for line in path.read_text(encoding="utf-8").splitlines()[1:]:
        vals = line.split("\t")
        if int(vals[0]) < before:
            rows.append((int(vals[0]), *map(float, vals[1:])))
    return rows


def cmd_train(cfg, args):
    graph, grammar, ds = load_inputs(cfg)
    train_eps = ds.split("train")
    model = build_model(cfg, graph, grammar)
    tcfg = cfg.train_config()
    out = Path(cfg.paths.run_dir)
    out.mkdir(parents=True, exist_ok=True)
    opt = Adam(model.params, lr=tcfg.lr)
    start, curve = 0, []
    if args.resume:
        try:
            start = load_training_state(args.resume, model, opt)
        except ValueError as exc:
            raise CheckpointMismatch(f"{args.resume} does not fit the configured model: {exc}") from exc
        curve = _read_curve(out / "curve.tsv", start)
        log.info("resuming from %s at step %d", args.resume, start)
    (out / "config.yaml").write_text(config_mod.dump(cfg), encoding="utf-8")
    _write_json(out / "manifest.json", run_manifest(
        cfg, "train", n_params=model.n_params(), dataset=ds.manifest, resumed_from_step=start))
    fit(model, train_eps, tcfg, out_dir=out, start_step=start, opt=opt, curve=curve)
    log.info("checkpoints in %s", out)
    return EXIT_OK


def cmd_eval(cfg, args):
    graph, grammar, ds = load_inputs(cfg)
    model = build_model(cfg, graph, grammar)
    ckpt = checkpoint_path(cfg)
    load_weights(model, ckpt)
    splits = {name: ds.split(name) for name in sorted(ds.splits) if name != "train"}
    if not splits:
        raise D.DatasetError(f"{cfg.paths.dataset}: no evaluation split")
    rep, records = metrics.evaluate(model, splits, cfg.eval.alphas, cfg.eval.betas, cfg.eval.beta_model)
    out = Path(args.out) if args.out else Path(cfg.paths.run_dir) / "eval"
    out.mkdir(parents=True, exist_ok=True)
    title = "no-kg" if not cfg.model.use_kg else "kg"
    (out / "report.txt").write_text(rep.table(title) + "\n", encoding="utf-8")
    (out / "report.json").write_text(rep.to_json() + "\n", encoding="utf-8")
    with open(out / "predictions.jsonl", "w", encoding="utf-8", newline="\n") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")
    _write_json(out / "manifest.json", run_manifest(cfg, "eval", checkpoint=str(ckpt)))
    print(rep.table(title))
    return EXIT_OK


def _find_episode(ds, ep_id):
    if ep_id is None:
        raise config_mod.ConfigError("--episode is required")
    if ep_id not in ds.episodes:
        raise D.DatasetError(f"unknown episode id {ep_id!r}")
    return ds.episodes[ep_id]


def cmd_predict(cfg, args):
    graph, grammar, ds = load_inputs(cfg)
    ep = _find_episode(ds, args.episode)
    model = build_model(cfg, graph, grammar)
    ckpt = checkpoint_path(cfg)
    load_weights(model, ckpt)
    alpha, beta = cfg.eval.alphas[0], cfg.eval.betas[0]
    win = D.window(ep, alpha, beta)
    model_win = D.window(ep, alpha, max(beta, cfg.eval.beta_model))
    frames, bundle, batch = model.predict([ep], [model_win], record=True)
    pred = frames[0][:win.horizon]
    names = grammar.class_names
    dump = {
        "episode": ep.id, "activity": ep.activity, "n_frames": ep.n_frames,
        "alpha": alpha, "beta": beta, "n_obs": win.n_obs, "horizon": win.horizon,
        "model_horizon": model_win.horizon, "use_kg": cfg.model.use_kg,
        "observed": _segments(ep.labels[:win.n_obs], names),
        "predicted": _segments(pred, names),
        "truth": _segments(ep.labels[win.n_obs:win.n_obs + win.horizon], names),
        "a_pred": bundle.a_pred.data[0].tolist(),
        "d_pred": bundle.d_pred.data[0].tolist(),
        "active_nodes": [graph.nodes[i].name for i in batch.active[0]],
        "r_enc": None if bundle.r_enc is None else bundle.r_enc[0].tolist(),
        "r_dec": None if bundle.r_dec is None else bundle.r_dec[0].tolist(),
        "attention": {k: v[0].tolist() for k, v in sorted(bundle.attention.items())},
    }
    if not cfg.model.use_kg:
        eye = np.eye(cfg.model.d_k).tolist()
        dump["r_enc"] = dump["r_dec"] = eye
    text = json.dumps(dump, indent=1, sort_keys=True) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    for label in ("observed", "predicted", "truth"):
        log.info("%-9s %s", label, " ".join(f"{a}x{n}" for a, n in dump[label]))
    return EXIT_OK


def cmd_inspect_graph(cfg, args):
    graph = KG.load_graph(cfg.paths.graph_path())
    info = {
        "nodes": [{"id": n.id, "kind": n.kind, "name": n.name, "degree": len(graph.neighbors(n.id))}
                  for n in graph.nodes],
        "edges": [[r, graph.nodes[a].name, graph.nodes[b].name] for r, a, b in graph.edges],
    }
    if args.episode is not None:
        grammar = D.load_grammar(cfg.paths.grammar_path()).validate(graph)
        ds = D.read_dataset(cfg.paths.dataset)
        ep = _find_episode(ds, args.episode)
        model = build_model(cfg, graph, grammar)
        ckpt = checkpoint_path(cfg)
        if cfg.paths.checkpoint or ckpt.is_file():
            load_weights(model, ckpt)
        alpha = cfg.eval.alphas[0]
        win = D.window(ep, alpha, cfg.eval.betas[0])
        obs = ep.frames[:win.n_obs]
        visual = obs.mean(axis=0)
        scenes = ep.scenes[:win.n_obs]
        m = model.cfg
        frame_vis = obs if m.kg_mode == "frame" else None
        with no_grad():
            active, depth = KG.select_active(graph, model.concept, scenes, visual, m.gamma, m.prop_steps,
                                             m.n_max, frame_visuals=frame_vis)
            imp = model.concept.importance_many(list(range(len(graph))), visual)
        info["window"] = {
            "episode": ep.id, "alpha": alpha, "n_obs": win.n_obs,
            "detected": sorted(graph.nodes[i].name for i in KG.detect_objects(graph, set().union(*scenes))),
            "active": [{"name": graph.nodes[i].name, "round": d, "importance": round(float(imp[i]), 6)}
                       for i, d in zip(active, depth)],
        }
    text = json.dumps(info, indent=1, sort_keys=True) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


VERBS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "inspect-graph": cmd_inspect_graph,
}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run config (defaults if omitted)")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--no-kg", action="store_true", help="ablation: plain attention, no propagation")
    common.add_argument("--deterministic", action="store_true", help="single-threaded BLAS")
    common.add_argument("--alpha", type=parse_fraction, nargs="+", help="observation ratio(s), 0.1 or 10%%")
    common.add_argument("--beta", type=parse_fraction, nargs="+", help="prediction horizon(s), 0.3 or 30%%")
    common.add_argument("--dataset", help="dataset directory")
    common.add_argument("--run-dir", help="run output directory")
    common.add_argument("--checkpoint", help="checkpoint to load (default <run-dir>/final.ckpt)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="kgant", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="verb", required=True)
    sub.add_parser("gen-data", parents=[common], help="generate a synthetic dataset")
    t = sub.add_parser("train", parents=[common], help="train a model")
    t.add_argument("--steps", type=int, help="override train.steps")
    t.add_argument("--resume", help="training checkpoint to continue from")
    e = sub.add_parser("eval", parents=[common], help="score a checkpoint on the test split")
    e.add_argument("--out", help="report directory (default <run-dir>/eval)")
    pr = sub.add_parser("predict", parents=[common], help="dump one window's prediction as JSON")
    pr.add_argument("--episode", help="episode id")
    pr.add_argument("--out", help="write JSON here instead of stdout")
    g = sub.add_parser("inspect-graph", parents=[common], help="dump the graph (and an episode's active set)")
    g.add_argument("--episode", help="also propagate over this episode's first window")
    g.add_argument("--out", help="write JSON here instead of stdout")
    return p


def _thread_limit(deterministic):
    if not deterministic:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=1)


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr, force=True)
    try:
        cfg = resolve_config(args)
        with _thread_limit(args.deterministic):
            return VERBS[args.verb](cfg, args)
    except (config_mod.ConfigError, D.GrammarError, KG.GraphFormatError, checkpoint.CheckpointError) as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except (D.DatasetError, D.WindowError, KG.UnknownObjectError, FileNotFoundError) as exc:
        log.error("data error: %s", exc)
        return EXIT_DATA
    except (NumericError, FloatingPointError) as exc:
        log.error("numeric error: %s", exc)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
