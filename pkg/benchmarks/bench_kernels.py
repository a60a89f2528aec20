"""Numba vs. numpy timings for the hot kernels, plus one end-to-end training step.

    python benchmarks/bench_kernels.py [--repeat 20]

Both kernel variants are timed in this process.  The training-step rows
re-run in subprocesses with and without ``KGANT_DISABLE_NUMBA=1`` since the
switch is read at import.
"""
import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from kgant import kernels as K

STEP_SNIPPET = """
import time, numpy as np
from kgant import data, knowledge_graph as kg, model as M, train as T, autograd as ag
g = kg.load_graph(data.default_resource("kitchen.graph"))
gr = data.load_grammar(data.default_resource("kitchen_grammar.yaml"))
eps = data.generate(gr, 32, 0)
m = M.KGAnticipator(M.ModelConfig(n_classes=gr.n_classes), g, seed=0)
cfg = T.TrainConfig(steps=10**6)
opt = ag.Adam(m.params, lr=cfg.lr)
T.train_step(m, opt, eps, cfg, 0)
t = time.perf_counter()
for s in range(1, 11):
    T.train_step(m, opt, eps, cfg, s)
print((time.perf_counter() - t) / 10)
"""


def cases(rng):
    B, T, I, H = 16, 16, 32, 32
    x = rng.normal(size=(B, T, I))
    w = rng.normal(scale=0.2, size=(I + H, 4 * H))
    b = rng.normal(size=4 * H)
    h, c, gates = K.lstm_forward_np(x, w, b)
    dh = rng.normal(size=h.shape)
    ln_x = rng.normal(size=(16 * 64, 32))
    gain, bias = rng.normal(size=32), rng.normal(size=32)
    _, xhat, inv = K.layer_norm_forward_np(ln_x, gain, bias, 1e-5)
    sm_x = rng.normal(size=(16 * 4 * 64, 64))
    sm_y = K.softmax_forward_np(sm_x)
    seq_a, seq_b = rng.integers(0, 12, size=200), rng.integers(0, 12, size=200)
    return {
        "lstm forward (16x16x32)": (K.lstm_forward_np, K.lstm_forward_nb, (x, w, b)),
        "lstm backward": (K.lstm_backward_np, K.lstm_backward_nb, (dh, x, w, h, c, gates)),
        "layer_norm forward (1024x32)": (K.layer_norm_forward_np, K.layer_norm_forward_nb,
                                         (ln_x, gain, bias, 1e-5)),
        "layer_norm backward": (K.layer_norm_backward_np, K.layer_norm_backward_nb,
                                (ln_x, xhat, inv, gain)),
        "softmax forward (4096x64)": (K.softmax_forward_np, K.softmax_forward_nb, (sm_x,)),
        "softmax backward": (K.softmax_backward_np, K.softmax_backward_nb, (sm_x, sm_y)),
        "levenshtein (200 vs 200)": (K.levenshtein_np, K.levenshtein_nb, (seq_a, seq_b)),
    }


def best_of(fn, args, repeat):
    fn(*args)  # warm-up / compile
    return min(timeit.repeat(lambda: fn(*args), number=1, repeat=repeat))


def step_time(disable):
    env = dict(os.environ)
    env.pop("KGANT_DISABLE_NUMBA", None)
    if disable:
        env["KGANT_DISABLE_NUMBA"] = "1"
    out = subprocess.run([sys.executable, "-c", STEP_SNIPPET], env=env, check=True,
                         capture_output=True, text=True)
    return float(out.stdout.strip().splitlines()[-1])


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--skip-step", action="store_true", help="kernels only")
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    print(f"{'kernel':32s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s}")
    for name, (f_np, f_nb, a) in cases(rng).items():
        t_np, t_nb = best_of(f_np, a, args.repeat), best_of(f_nb, a, args.repeat)
        print(f"{name:32s} {t_np * 1e3:10.3f} {t_nb * 1e3:10.3f} {t_np / t_nb:7.1f}x")
    if not args.skip_step:
        t_np, t_nb = step_time(True), step_time(False)
        print(f"{'train step (batch 16)':32s} {t_np * 1e3:10.1f} {t_nb * 1e3:10.1f} {t_np / t_nb:7.1f}x")


if __name__ == "__main__":
    main()
