"""Shared helpers: MLP-backed fixtures for reference graphs and a finite-difference checker."""
from __future__ import annotations

import numpy as np

from pgdag.autodiff_nn import backward, evaluate_loss, make_store
from pgdag.envs import EnvDescriptor
from pgdag.graph_ir import PARAM_SIGNATURES
from pgdag.ops import NoiseStream
from pgdag.reference_graphs import random_stubs, reference_graph

DISCRETE = EnvDescriptor("test-discrete", 4, "discrete", 10, 0.0, 1.0, n_actions=2)
CONTINUOUS = EnvDescriptor("test-continuous", 3, "continuous", 10, -1.0, 0.0, action_dim=1, a_low=-2.0, a_high=2.0)


def mlp_fixture(name: str, seed: int, batch: int = 8):
    """Reference graph, MLP store with non-zero heads, and a conforming batch."""
    g0 = reference_graph(name)
    desc = CONTINUOUS if g0.action_space == "continuous" else DISCRETE
    st, _ = random_stubs(name, seed, batch, state_dim=desc.state_dim, n_actions=desc.n_actions or 2,
                         action_dim=desc.action_dim or 1)
    g = reference_graph(name, st.hp)
    kinds = {n.store_key: PARAM_SIGNATURES[n.signature].net_kind for n in g.nodes if n.kind == "parameter"}
    store = make_store(kinds, desc, seed, zero_head=False)
    bindings = st.bindings()
    bindings["a_low"], bindings["a_high"] = np.array([[desc.a_low]]), np.array([[desc.a_high]])
    return g, store, bindings, st.hp


def fd_gradient_errors(g, store, bindings, hp, rng, n_coords: int = 10, h: float = 1e-5) -> dict[str, float]:
    """max |AD - FD| / (1 + max |FD|) over ``n_coords`` random weights of each store in the graph."""
    keys = sorted({n.store_key for n in g.nodes if n.kind == "parameter"})
    _, tape = evaluate_loss(g, store, bindings, hp, NoiseStream(0))
    grads = backward(tape, set(keys))
    errs = {}
    for key in keys:
        params = store[key].params
        names = sorted(params)
        sizes = np.array([params[n].size for n in names])
        ad, fd = [], []
        for _ in range(n_coords):
            which = int(rng.choice(len(names), p=sizes / sizes.sum()))
            name = names[which]
            idx = np.unravel_index(int(rng.integers(params[name].size)), params[name].shape)
            old = params[name][idx]
            params[name][idx] = old + h
            lp, _ = evaluate_loss(g, store, bindings, hp, NoiseStream(0))
            params[name][idx] = old - h
            lm, _ = evaluate_loss(g, store, bindings, hp, NoiseStream(0))
            params[name][idx] = old
            fd.append((lp - lm) / (2 * h))
            ad.append(grads.get(key, {}).get(name, np.zeros_like(params[name]))[idx])
        ad, fd = np.array(ad), np.array(fd)
        errs[key] = float(np.max(np.abs(ad - fd)) / (1.0 + np.max(np.abs(fd))))
    return errs
