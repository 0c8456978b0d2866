"""Shared test utilities: finite differences and toy sequences."""

import numpy as np

from minicoder import tokenizer as tok


def numeric_gradients(params, loss_fn, h=1e-5):
    """Central finite differences of ``loss_fn`` w.r.t. every parameter.

    ``loss_fn`` must read the (mutated in place) ``params`` dict and return
    a scalar.  Parameters should be float64 for usable precision.
    """
    grads = {}
    for name, value in params.items():
        grad = np.zeros_like(value)
        flat = value.reshape(-1)
        flat_grad = grad.reshape(-1)
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + h
            plus = loss_fn()
            flat[i] = original - h
            minus = loss_fn()
            flat[i] = original
            flat_grad[i] = (plus - minus) / (2.0 * h)
        grads[name] = grad
    return grads


def max_relative_error(analytic, numeric, guard=1e-6):
    """Worst relative disagreement across all parameters.

    The denominator is guarded so coordinates where both gradients are
    essentially zero do not produce spurious ratios.
    """
    worst = 0.0
    for name in analytic:
        a = analytic[name]
        n = numeric[name]
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), guard)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst


def make_pair(n_descr, n_code, vocab_size, salt=0):
    """Token sequence shaped like a docstring-code pair with arbitrary ids."""
    seq = tok.TokenSequence()
    seq.append_special(tok.DESCR_ID)
    for j in range(n_descr):
        seq.ids.append(tok.NUM_SPECIALS + (salt + 3 * j) % (vocab_size - tok.NUM_SPECIALS))
        seq.segments.append(tok.Segment.DESCR)
    seq.append_special(tok.PYTHON_ID)
    for j in range(n_code):
        seq.ids.append(tok.NUM_SPECIALS + (salt + 5 * j + 1) % (vocab_size - tok.NUM_SPECIALS))
        seq.segments.append(tok.Segment.CODE)
    seq.append_special(tok.EOC_ID)
    return seq
