"""Message-passing network with particle attention producing complex backflow shifts.

The configuration becomes an all-to-all graph: node states carry a learnable
embedding (no single-particle positions or spins, which keeps the
displacements translation invariant), edge states carry periodic pair
features. Each iteration exchanges attention-weighted messages and updates
the hidden parts of both fields, re-concatenating the initial features as a
skip connection. A final complex linear map reads the displacement off each
node.
"""

from __future__ import annotations

import dataclasses
from typing import Any

import jax
import jax.numpy as jnp

from .cell import displacement_table, fourier_features, periodic_norm

Params = Any  # nested dict / list pytree of jnp arrays

_EDGE_FEATURES = 8  # 6 fourier + 1 periodic norm + 1 spin product


@dataclasses.dataclass(frozen=True)
class BackflowConfig:
    """Hyperparameters; the parameter count depends on these, never on N."""

    n_iterations: int = 1
    embed_dim: int = 8
    node_hidden: int = 32
    edge_hidden: int = 32
    mlp_hidden: int = 32

    @property
    def node_dim(self) -> int:
        return self.embed_dim + self.node_hidden

    @property
    def edge_dim(self) -> int:
        return _EDGE_FEATURES + self.edge_hidden


def _gelu(x: jnp.ndarray) -> jnp.ndarray:
    return jax.nn.gelu(x, approximate=False)


def init_mlp(key: jax.Array, sizes: tuple[int, ...]) -> list[dict[str, jnp.ndarray]]:
    """One-hidden-layer (or deeper) MLP, fan-in-scaled normal weights, zero bias."""
    layers = []
    for n_in, n_out in zip(sizes[:-1], sizes[1:]):
        key, sub = jax.random.split(key)
        w = jax.random.normal(sub, (n_in, n_out)) / jnp.sqrt(n_in)
        layers.append({"w": w, "b": jnp.zeros(n_out)})
    return layers


def apply_mlp(layers: list[dict[str, jnp.ndarray]], x: jnp.ndarray) -> jnp.ndarray:
    """GELU on hidden layers, linear output; acts on the last axis."""
    for layer in layers[:-1]:
        x = _gelu(x @ layer["w"] + layer["b"])
    last = layers[-1]
    return x @ last["w"] + last["b"]


def init_backflow_params(key: jax.Array, cfg: BackflowConfig) -> Params:
    keys = jax.random.split(key, 4 + cfg.n_iterations)
    d1, d2 = cfg.node_dim, cfg.edge_dim
    steps = []
    for t in range(cfg.n_iterations):
        k_q, k_k, k_phi, k_f, k_fe = jax.random.split(keys[4 + t], 5)
        steps.append(
            {
                "w_q": jax.random.normal(k_q, (d2, d2)) / jnp.sqrt(d2),
                "w_k": jax.random.normal(k_k, (d2, d2)) / jnp.sqrt(d2),
                "phi": init_mlp(k_phi, (d2, cfg.mlp_hidden, d2)),
                "f_node": init_mlp(k_f, (d1 + d2, cfg.mlp_hidden, cfg.node_hidden)),
                "f_edge": init_mlp(k_fe, (2 * d2, cfg.mlp_hidden, cfg.edge_hidden)),
            }
        )
    # small output map: optimization starts near the bare determinant
    out_scale = 1e-2 / jnp.sqrt(d1)
    return {
        "embedding": jax.random.normal(keys[0], (cfg.embed_dim,)),
        "h_node0": jax.random.normal(keys[1], (cfg.node_hidden,)),
        "h_edge0": jax.random.normal(keys[2], (cfg.edge_hidden,)),
        "steps": steps,
        "w_out_re": out_scale * jax.random.normal(keys[3], (3, d1)),
        "w_out_im": out_scale * jax.random.normal(jax.random.fold_in(keys[3], 1), (3, d1)),
    }


def initial_features(
    positions: jnp.ndarray, spins: jnp.ndarray, params: Params, length: float
) -> tuple[jnp.ndarray, jnp.ndarray]:
    """Node features (N, embed) and edge features (N, N, 8).

    Nodes are the broadcast embedding only. Edge (i, j) carries the Fourier
    map of the min-imaged displacement r_i - r_j, the periodic norm
    surrogate, and the spin product. Diagonal entries are well defined
    (r_ii = 0) but masked out of message aggregation later.
    """
    n = positions.shape[0]
    disp = displacement_table(positions, length)
    fourier = fourier_features(disp, length)
    diag = jnp.eye(n, dtype=bool)[:, :, None]
    # norm has a non-differentiable point at zero displacement; route the
    # diagonal through a dummy value and mask it back to zero
    safe = jnp.where(diag, length / 4.0, disp)
    pnorm = jnp.where(diag[..., 0], 0.0, periodic_norm(safe, length))
    spin_prod = jnp.asarray(spins)[:, None] * jnp.asarray(spins)[None, :]
    edges = jnp.concatenate(
        [fourier, pnorm[:, :, None], spin_prod[:, :, None].astype(fourier.dtype)], axis=-1
    )
    nodes = jnp.broadcast_to(params["embedding"], (n, params["embedding"].shape[0]))
    return nodes, edges


def particle_attention(
    edges: jnp.ndarray, w_q: jnp.ndarray, w_k: jnp.ndarray, phi: list
) -> jnp.ndarray:
    """Messages m_ij = omega_ij * phi(g_ij), attention contracted over particles.

    omega_ij[c] = GELU(sum_l Q_il[c] K_lj[c]) with Q_ij = W_Q g_ij,
    K_ij = W_K g_ij; per-channel contraction over the particle index, no
    scaling factor.
    """
    q = jnp.einsum("cd,ijd->ijc", w_q, edges)
    k = jnp.einsum("cd,ijd->ijc", w_k, edges)
    omega = _gelu(jnp.einsum("ilc,ljc->ijc", q, k))
    return omega * apply_mlp(phi, edges)


def mpnn_step(
    nodes: jnp.ndarray,
    edges: jnp.ndarray,
    x0_nodes: jnp.ndarray,
    x0_edges: jnp.ndarray,
    step_params: dict,
) -> tuple[jnp.ndarray, jnp.ndarray]:
    """One message-passing update; returns re-concatenated (nodes, edges)."""
    n = nodes.shape[0]
    messages = particle_attention(edges, step_params["w_q"], step_params["w_k"], step_params["phi"])
    offdiag = (1.0 - jnp.eye(n))[:, :, None]
    incoming = jnp.sum(messages * offdiag, axis=1)  # sum over j != i; empty -> 0
    h_node = apply_mlp(step_params["f_node"], jnp.concatenate([nodes, incoming], axis=-1))
    h_edge = apply_mlp(step_params["f_edge"], jnp.concatenate([edges, messages], axis=-1))
    return (
        jnp.concatenate([x0_nodes, h_node], axis=-1),
        jnp.concatenate([x0_edges, h_edge], axis=-1),
    )


def backflow_displacements(
    positions: jnp.ndarray,
    spins: jnp.ndarray,
    params: Params,
    length: float,
) -> jnp.ndarray:
    """Complex displacements delta r, shape (N, 3); y = r + delta r downstream."""
    x0_nodes, x0_edges = initial_features(positions, spins, params, length)
    n = positions.shape[0]
    nodes = jnp.concatenate([x0_nodes, jnp.broadcast_to(params["h_node0"], (n, params["h_node0"].shape[0]))], axis=-1)
    edges = jnp.concatenate(
        [x0_edges, jnp.broadcast_to(params["h_edge0"], (n, n, params["h_edge0"].shape[0]))],
        axis=-1,
    )
    for step_params in params["steps"]:
        nodes, edges = mpnn_step(nodes, edges, x0_nodes, x0_edges, step_params)
    # two real maps assembled with lax.complex keep reverse mode silent about
    # complex-to-real cotangent conversion
    return jax.lax.complex(nodes @ params["w_out_re"].T, nodes @ params["w_out_im"].T)


def count_parameters(params: Params) -> int:
    leaves = jax.tree_util.tree_leaves(params)
    return int(sum(leaf.size for leaf in leaves))
