"""Independent oracles shared by the test modules."""

import numpy as np

from sxlnet import tensor as tc
from sxlnet.model import ModelConfig, init_params, pretrain_forward_batch
from sxlnet.permutation import AttentionMasks
from sxlnet.trainer import batch_by_frames

# (number, name, passed, detail) rows collected by the acceptance suite
ACCEPTANCE = []


def report(num, name, ok, detail=""):
    ACCEPTANCE.append((num, name, bool(ok), detail))
    print(f"[{'PASS' if ok else 'FAIL'}] {num}. {name}: {detail}", flush=True)
    return ok


def numeric_grad(f, arr, h=1e-5):
    """Central differences of scalar ``f()`` w.r.t. every entry of ``arr`` (mutated in place, restored)."""
    g = np.zeros_like(arr, dtype=np.float64)
    flat = arr.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = f()
        flat[i] = old - h
        down = f()
        flat[i] = old
        gf[i] = (up - down) / (2 * h)
    return g


def rel_err(a, b):
    scale = max(np.abs(a).max(), np.abs(b).max(), 1e-8)
    return float(np.abs(a - b).max() / scale)


def reorder_oracle_masks(order):
    """Masks by physically permuting the sequence, applying triangular masks, and permuting back."""
    order = np.asarray(order)
    t = len(order)
    tri_content = np.tril(np.ones((t, t), dtype=bool))
    tri_query = np.tril(np.ones((t, t), dtype=bool), k=-1)
    content = np.zeros((t, t), dtype=bool)
    query = np.zeros((t, t), dtype=bool)
    # row a / column b of the reordered sequence are positions order[a] / order[b]
    for a in range(t):
        for b in range(t):
            content[order[a], order[b]] = tri_content[a, b]
            query[order[a], order[b]] = tri_query[a, b]
    return content, query


def tiny_config(**kw):
    base = dict(num_layers=2, num_heads=2, d_model=16, d_inner=32, F_in=8, C_out=4, dropout_p=0.0)
    base.update(kw)
    return ModelConfig(**base)


def ar_reference_trainer(seqs, cfg: ModelConfig, steps, seed, batch_frames, lr_fn, beta1=0.9, beta2=0.999,
                         eps=1e-6, weight_decay=0.01):
    """Left-to-right AR pretraining written without the permutation module or the trainer loop.

    Masks are plain triangles, every frame is a target, and Adam is spelled out.
    Returns the per-step loss trajectory.
    """
    params = init_params(cfg, seed, np.float64)
    names = params.names()
    m = {n: np.zeros_like(params[n].data) for n in names}
    v = {n: np.zeros_like(params[n].data) for n in names}
    skip_decay = {n for n in names if ".ln" in n or n.startswith("ln_f") or n == "query_seed"}
    losses = []
    epoch, queue = 0, []
    with tc.precision(np.float64):
        for step in range(1, steps + 1):
            if not queue:
                queue = batch_by_frames(seqs, batch_frames, seed, epoch)
                epoch += 1
            batch = queue.pop(0)
            frames = [seqs[i].frames for i in batch]
            masks = []
            for f in frames:
                t = len(f)
                masks.append(AttentionMasks(np.tril(np.ones((t, t), bool)), np.tril(np.ones((t, t), bool), -1),
                                            np.arange(t)))
            out = pretrain_forward_batch(params, frames, masks)
            target = np.concatenate([np.asarray(f, dtype=np.float64) for f in frames])
            loss = tc.huber_loss(out.output, target, cfg.huber_delta)
            losses.append(loss.item())
            params.zero_grad()
            loss.backward()
            lr = lr_fn(step)
            for n in names:
                p = params[n]
                g = p.grad if p.grad is not None else np.zeros_like(p.data)
                m[n] = beta1 * m[n] + (1 - beta1) * g
                v[n] = beta2 * v[n] + (1 - beta2) * g * g
                mhat = m[n] / (1 - beta1 ** step)
                vhat = v[n] / (1 - beta2 ** step)
                upd = mhat / (np.sqrt(vhat) + eps)
                if n not in skip_decay:
                    upd = upd + weight_decay * p.data
                p.data -= lr * upd
            params.zero_grad()
    return losses
