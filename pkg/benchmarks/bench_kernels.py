"""Time the numba kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--rows 4096] [--width 64] [--repeat 20]

Each kernel runs on identical inputs under both backends; outputs are
compared before timing. The last row is one full forward/backward pass of
the default model on a batch of 8 sequences.
"""

import argparse
import logging
import timeit

import numpy as np

from prefalign import numerics as nx
from prefalign.model import ModelConfig, PolicyModel
from prefalign.numerics import RngState, kernels
from prefalign.sft import InputSetting, encode_samples, make_batch, sft_loss
from prefalign.taskgen import generate_dataset, task_vocab

log = logging.getLogger("bench")


def kernel_cases(rows: int, width: int, seq: int):
    r = np.random.default_rng(0)
    x = r.normal(size=(rows, width))
    g = r.normal(size=(rows, width))
    gamma, beta = r.normal(size=width), r.normal(size=width)
    att = r.normal(size=(rows // seq * seq, seq))
    flat = r.normal(size=rows * width)
    m, v = np.zeros_like(flat), np.zeros_like(flat)

    def softmax(K):
        y = K.softmax_fwd(x)
        return K.softmax_bwd(y, g)

    def causal(K):
        y = K.causal_softmax_fwd(att, seq)
        return K.causal_softmax_bwd(y, att, seq)

    def log_softmax(K):
        y = K.log_softmax_fwd(x)
        return K.log_softmax_bwd(y, g)

    def layer_norm(K):
        y, xhat, rstd = K.layer_norm_fwd(x, gamma, beta, 1e-8)
        return K.layer_norm_bwd(g, xhat, rstd, gamma)[0]

    def gelu(K):
        return K.gelu_bwd(flat, K.gelu_fwd(flat))

    def adam(K):
        p = flat.copy()
        K.adam_update(p, flat, m.copy(), v.copy(), 1e-3, 0.9, 0.999, 1e-8, 1)
        return p

    return {"softmax": softmax, "causal_softmax": causal, "log_softmax": log_softmax,
            "layer_norm": layer_norm, "gelu": gelu, "adam": adam}


def model_step():
    vocab = task_vocab()
    model = PolicyModel(ModelConfig(vocab_size=len(vocab)), RngState(0))
    enc = encode_samples(vocab, generate_dataset(0, 8), InputSetting.TEXT_IMAGE_CAPTION)
    batch = make_batch(vocab, [(p, r) for p, r, _ in enc], [img for _, _, img in enc])

    def step(_K):
        loss = sft_loss(model, batch)
        nx.backward(loss)
        for t in model.params.values():
            t.grad = None
        return loss.item()

    return step


def best_of(fn, repeat: int) -> float:
    fn()  # warm-up (and jit compile for numba)
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--rows", type=int, default=4096)
    ap.add_argument("--width", type=int, default=64)
    ap.add_argument("--seq", type=int, default=64, help="row length of the causal-softmax case")
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    backends = kernels.available_backends()
    if "numba" not in backends:
        log.warning("numba is not importable; timing the numpy path only")
    cases = kernel_cases(args.rows, args.width, args.seq)
    cases["model fwd+bwd"] = model_step()
    prev = kernels.get_backend()
    print(f"{'case':<16}" + "".join(f"{b + ' ms':>12}" for b in backends) + f"{'speedup':>10}")
    try:
        for name, fn in cases.items():
            times, outs = {}, {}
            for b in backends:
                kernels.set_backend(b)
                outs[b] = np.asarray(fn(kernels.K))
                times[b] = best_of(lambda: fn(kernels.K), args.repeat)
            if len(backends) > 1 and not np.allclose(outs["numba"], outs["numpy"], rtol=1e-10, atol=1e-12):
                log.error("%s: backends disagree", name)
            speed = times["numpy"] / times["numba"] if "numba" in times else float("nan")
            print(f"{name:<16}" + "".join(f"{1e3 * times[b]:>12.3f}" for b in backends) + f"{speed:>9.2f}x")
    finally:
        kernels.set_backend(prev)


if __name__ == "__main__":
    main()
