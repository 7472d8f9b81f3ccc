"""Chunked vmap: bounded-memory batched evaluation.

The Laplacian pipeline materializes one forward graph per coordinate
direction, so naive vmap over a large walker batch exhausts memory on small
machines; mapping over fixed-size chunks keeps the peak footprint flat.
"""

from __future__ import annotations

from typing import Callable

import jax
import jax.numpy as jnp


def chunked_vmap(fn: Callable, chunk_size: int) -> Callable:
    """vmap fn over the leading axis of its first argument, chunk by chunk.

    Trailing arguments are broadcast, not mapped (they typically hold
    parameter pytrees shared across the batch).
    """
    if chunk_size < 1:
        raise ValueError(f"chunk_size must be positive, got {chunk_size}")

    def apply(batch: jnp.ndarray, *args):
        vfn = jax.vmap(fn, in_axes=(0,) + (None,) * len(args))
        n = batch.shape[0]
        if n <= chunk_size:
            return vfn(batch, *args)
        n_full = (n // chunk_size) * chunk_size
        head = batch[:n_full].reshape((n_full // chunk_size, chunk_size) + batch.shape[1:])
        mapped = jax.lax.map(lambda c: vfn(c, *args), head)
        out = jax.tree_util.tree_map(
            lambda x: x.reshape((n_full,) + x.shape[2:]), mapped
        )
        if n_full == n:
            return out
        tail = vfn(batch[n_full:], *args)
        return jax.tree_util.tree_map(
            lambda a, b: jnp.concatenate([a, b], axis=0), out, tail
        )

    return apply
