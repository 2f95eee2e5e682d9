"""Shared test utilities: the finite-difference gradient oracle and small
graph builders. Oracles here stay independent of the library code paths
they check (plain loops, no shared kernels)."""

import numpy as np

from kgc.graph import KnowledgeGraph
from kgc.tensor import Tensor


def finite_difference_grads(build, params, step=1e-5):
    """Central-difference gradients of the scalar ``build()`` with respect
    to each tensor in ``params``, perturbing raw float64 data in place."""
    grads = []
    for p in params:
        flat = p.data.reshape(-1)
        grad = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = float(build().data)
            flat[i] = orig - step
            lo = float(build().data)
            flat[i] = orig
            grad[i] = (hi - lo) / (2.0 * step)
        grads.append(grad.reshape(p.data.shape))
    return grads


def analytic_grads(build, params):
    """Reverse-mode gradients of ``build()`` for the same parameters."""
    for p in params:
        p.zero_grad()
    out = build()
    out.backward()
    collected = []
    for p in params:
        if p.sparse_grad:
            collected.append(p.row_grad.to_dense())
        elif p.grad is not None:
            collected.append(p.grad.copy())
        else:
            collected.append(np.zeros_like(p.data))
    return collected


def max_scaled_error(a, b):
    """max |a - b| / max(1, |a|, |b|), elementwise."""
    scale = np.maximum(1.0, np.maximum(np.abs(a), np.abs(b)))
    return float((np.abs(a - b) / scale).max())


def check_gradients(build, params, step=1e-5, tol=1e-4):
    """Assert reverse-mode and central-difference gradients agree for a
    scalar-valued ``build()`` over float64 parameters."""
    for p in params:
        assert p.data.dtype == np.float64, "gradient checks run at float64"
    analytic = analytic_grads(build, params)
    numeric = finite_difference_grads(build, params, step)
    worst = 0.0
    for a, n in zip(analytic, numeric):
        worst = max(worst, max_scaled_error(a, n))
    assert worst < tol, f"gradient mismatch: max scaled error {worst:.3g}"
    return worst


def leaf(rng, shape, requires_grad=True, lo=-1.0, hi=1.0, sparse_grad=False):
    """float64 leaf tensor with uniform entries."""
    return Tensor(rng.uniform(lo, hi, size=shape), requires_grad=requires_grad,
                  sparse_grad=sparse_grad)


# ---------------------------------------------------------------------------
# graph builders
# ---------------------------------------------------------------------------

def graph_from_edges(edges, num_nodes=None, num_relations=None,
                     dev=(), test=()):
    """KnowledgeGraph from integer (e1, rel, e2) triples."""
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 3)
    dev = np.asarray(list(dev), dtype=np.int64).reshape(-1, 3)
    test = np.asarray(list(test), dtype=np.int64).reshape(-1, 3)
    stacked = np.concatenate([edges, dev, test], axis=0)
    if num_nodes is None:
        num_nodes = int(max(stacked[:, 0].max(), stacked[:, 2].max())) + 1
    if num_relations is None:
        num_relations = int(stacked[:, 1].max()) + 1
    phrases = [f"node {i}" for i in range(num_nodes)]
    relations = [f"rel{r}" for r in range(num_relations)]
    return KnowledgeGraph(phrases, relations,
                          {"train": edges, "dev": dev, "test": test})


def random_kg(rng, num_nodes=20, num_relations=3, num_edges=100,
              dev_edges=0, test_edges=0):
    """Uniform random KG; dev/test nodes always also appear in train."""
    def draw(count):
        e1 = rng.integers(0, num_nodes, size=count)
        rel = rng.integers(0, num_relations, size=count)
        e2 = rng.integers(0, num_nodes, size=count)
        bump = (e1 == e2)
        e2[bump] = (e2[bump] + 1) % num_nodes
        return np.stack([e1, rel, e2], axis=1)

    train = draw(num_edges)
    present = np.zeros(num_nodes, dtype=bool)
    present[train[:, 0]] = True
    present[train[:, 2]] = True
    for i in np.nonzero(~present)[0]:  # ensure every node is trained on
        j = int(rng.integers(0, num_nodes - 1))
        j += j >= i
        train = np.concatenate(
            [train, [[i, int(rng.integers(0, num_relations)), j]]], axis=0)

    def draw_seen(count):
        seen = np.nonzero(present | True)[0]
        e1 = seen[rng.integers(0, seen.size, size=count)]
        e2 = seen[rng.integers(0, seen.size, size=count)]
        bump = (e1 == e2)
        e2[bump] = (e2[bump] + 1) % num_nodes
        rel = rng.integers(0, num_relations, size=count)
        return np.stack([e1, rel, e2], axis=1)

    return graph_from_edges(train, num_nodes, num_relations,
                            dev=draw_seen(dev_edges) if dev_edges else (),
                            test=draw_seen(test_edges) if test_edges else ())


def typed_toy_kg(rng, num_nodes=50, num_relations=2, num_edges=200):
    """Random toy KG with relation-typed target pools.

    Sources draw from the first half of the nodes and each relation owns a
    disjoint slice of the second half as targets. The typing matters: the
    convolutional decoder is translational (the relation shifts the query
    additively), so a graph that assigns the same node pair opposite
    orientations under two relations is structurally non-memorizable for
    it. Typed pools rule such conflicts out, as real-world typed relations
    mostly do.
    """
    half = num_nodes // 2
    pool_size = (num_nodes - half) // num_relations
    pools = [np.arange(half + r * pool_size, half + (r + 1) * pool_size)
             for r in range(num_relations)]
    leftover = np.arange(half + num_relations * pool_size, num_nodes)
    pools[-1] = np.concatenate([pools[-1], leftover])

    rows = []
    for i in range(half):  # cover every source
        r = i % num_relations
        rows.append((i, r, int(pools[r][rng.integers(0, pools[r].size)])))
    for r, pool in enumerate(pools):  # cover every target
        covered = {e2 for _, rr, e2 in rows if rr == r}
        for t in pool:
            if int(t) not in covered:
                rows.append((int(rng.integers(0, half)), r, int(t)))
    while len(rows) < num_edges:
        r = int(rng.integers(0, num_relations))
        rows.append((int(rng.integers(0, half)), r,
                     int(pools[r][rng.integers(0, pools[r].size)])))
    assert len(rows) == num_edges, "num_edges too small to cover all nodes"
    return graph_from_edges(rows, num_nodes, num_relations)


def grouped_kg(rng, num_nodes=500, num_groups=20, num_relations=3,
               num_edges=4000, dev_edges=400):
    """Learnable synthetic KG: nodes belong to groups and each relation
    maps groups by a fixed permutation, so held-out edges are predictable
    from training co-occurrence."""
    group = rng.integers(0, num_groups, size=num_nodes)
    members = [np.nonzero(group == g)[0] for g in range(num_groups)]
    perms = [rng.permutation(num_groups) for _ in range(num_relations)]

    def draw(count):
        rows = []
        while len(rows) < count:
            rel = int(rng.integers(0, num_relations))
            g = int(rng.integers(0, num_groups))
            src_pool, dst_pool = members[g], members[perms[rel][g]]
            if not src_pool.size or not dst_pool.size:
                continue
            e1 = int(src_pool[rng.integers(0, src_pool.size)])
            e2 = int(dst_pool[rng.integers(0, dst_pool.size)])
            if e1 != e2:
                rows.append((e1, rel, e2))
        return np.asarray(rows, dtype=np.int64)

    train = draw(num_edges)
    present = np.zeros(num_nodes, dtype=bool)
    present[train[:, 0]] = True
    present[train[:, 2]] = True
    dev = np.asarray([row for row in draw(dev_edges * 2)
                      if present[row[0]] and present[row[2]]][:dev_edges],
                     dtype=np.int64)
    return graph_from_edges(train, num_nodes, num_relations, dev=dev)
