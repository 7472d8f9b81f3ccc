"""Checkpoint container: zip of raw little-endian arrays plus a JSON manifest.

Arrays are stored exactly (raw bytes, explicit little-endian dtype codes),
so load(save(x)) round-trips bit-for-bit.  Parameter pytrees are flattened
to slash-joined path names; restoring goes through a template pytree of the
same configuration, which pins both structure and leaf order.
"""

from __future__ import annotations

import dataclasses
import io
import json
import zipfile

import jax
import jax.numpy as jnp
import numpy as np

from .errors import ConfigurationError, InvalidInputError

FORMAT_VERSION = 1


def _path_name(key_path) -> str:
    parts = []
    for entry in key_path:
        if isinstance(entry, jax.tree_util.DictKey):
            parts.append(str(entry.key))
        elif isinstance(entry, jax.tree_util.SequenceKey):
            parts.append(str(entry.idx))
        else:
            parts.append(str(entry))
    return "/".join(parts)


def flatten_arrays(tree) -> dict[str, np.ndarray]:
    leaves = jax.tree_util.tree_flatten_with_path(tree)[0]
    return {_path_name(kp): np.asarray(leaf) for kp, leaf in leaves}


def restore_like(template, arrays: dict[str, np.ndarray], prefix: str = ""):
    """Fill a pytree shaped like template from named arrays."""
    leaves, treedef = jax.tree_util.tree_flatten_with_path(template)
    restored = []
    for key_path, leaf in leaves:
        name = prefix + _path_name(key_path)
        if name not in arrays:
            raise InvalidInputError(f"checkpoint missing array {name!r}")
        stored = arrays[name]
        if stored.shape != np.shape(leaf):
            raise InvalidInputError(
                f"checkpoint array {name!r} has shape {stored.shape}, "
                f"expected {np.shape(leaf)}"
            )
        restored.append(jnp.asarray(stored))
    return jax.tree_util.tree_unflatten(treedef, restored)


@dataclasses.dataclass
class Checkpoint:
    iteration: int
    config_hash: str
    arrays: dict[str, np.ndarray]
    scalars: dict

    def params(self, template):
        return restore_like(template, self.arrays, prefix="params/")

    def state_array(self, name: str) -> np.ndarray:
        return self.arrays[f"state/{name}"]


def save_checkpoint(
    path,
    *,
    params,
    state: dict[str, np.ndarray] | None = None,
    iteration: int = 0,
    config_hash: str = "",
    scalars: dict | None = None,
) -> None:
    arrays = {f"params/{k}": v for k, v in flatten_arrays(params).items()}
    for key, value in (state or {}).items():
        arrays[f"state/{key}"] = np.asarray(value)

    manifest = {
        "format_version": FORMAT_VERSION,
        "iteration": int(iteration),
        "config_hash": config_hash,
        "scalars": scalars or {},
        "arrays": {},
    }
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for index, (name, value) in enumerate(sorted(arrays.items())):
            shape = list(np.shape(value))
            # ascontiguousarray promotes 0-d to 1-d, so shape is taken first
            value = np.ascontiguousarray(value)
            little = value.astype(value.dtype.newbyteorder("<"), copy=False)
            file_name = f"arrays/{index:04d}.bin"
            manifest["arrays"][name] = {
                "dtype": little.dtype.str,
                "shape": shape,
                "file": file_name,
            }
            zf.writestr(file_name, little.tobytes())
        zf.writestr("manifest.json", json.dumps(manifest, indent=1, sort_keys=True))


def load_checkpoint(path) -> Checkpoint:
    try:
        with zipfile.ZipFile(path) as zf:
            manifest = json.loads(zf.read("manifest.json"))
            if manifest.get("format_version") != FORMAT_VERSION:
                raise InvalidInputError(
                    f"unsupported checkpoint format "
                    f"{manifest.get('format_version')!r}"
                )
            arrays = {}
            for name, spec in manifest["arrays"].items():
                buffer = zf.read(spec["file"])
                arr = np.frombuffer(buffer, dtype=np.dtype(spec["dtype"]))
                arrays[name] = arr.reshape(spec["shape"]).astype(
                    np.dtype(spec["dtype"]).newbyteorder("="), copy=False
                )
    except (zipfile.BadZipFile, KeyError, json.JSONDecodeError) as exc:
        raise InvalidInputError(f"cannot read checkpoint {path}: {exc}") from exc
    return Checkpoint(
        iteration=int(manifest["iteration"]),
        config_hash=manifest["config_hash"],
        arrays=arrays,
        scalars=manifest.get("scalars", {}),
    )


def check_config_hash(ckpt: Checkpoint, config_hash: str, force: bool = False):
    if ckpt.config_hash and ckpt.config_hash != config_hash and not force:
        raise ConfigurationError(
            "checkpoint was produced by a different configuration "
            f"({ckpt.config_hash[:12]} != {config_hash[:12]}); "
            "pass force to resume anyway"
        )
