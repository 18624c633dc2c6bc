"""Parameter tables and seeded initialization.

Weights live in flat ``dict[str, ndarray]`` tables keyed by dotted names.
Each tensor draws from its own generator seeded by ``(seed, crc32(name))``,
so a tensor's initial value does not depend on which other tensors exist.
That is what makes the group-0 slice of a 13-group model identical to the
single-group model.
"""
from __future__ import annotations

import math
import zlib

import numpy as np

TRUNC_NORMAL = "trunc_normal"
ZEROS = "zeros"
ONES = "ones"
HE_UNIFORM = "he_uniform"
SMALL_UNIFORM = "small_uniform"

Spec = dict[str, tuple[tuple[int, ...], str]]


def linear_spec(spec: Spec, name: str, n_in: int, n_out: int, bias: bool = True, init: str = TRUNC_NORMAL) -> None:
    spec[f"{name}.weight"] = ((n_in, n_out), init)
    if bias:
        spec[f"{name}.bias"] = ((n_out,), ZEROS if init != SMALL_UNIFORM else SMALL_UNIFORM)


def norm_spec(spec: Spec, name: str, dim: int) -> None:
    spec[f"{name}.weight"] = ((dim,), ONES)
    spec[f"{name}.bias"] = ((dim,), ZEROS)


def conv_spec(spec: Spec, name: str, k: int, c_in: int, c_out: int) -> None:
    spec[f"{name}.weight"] = ((k, k, c_in, c_out), HE_UNIFORM)
    spec[f"{name}.bias"] = ((c_out,), ZEROS)


def mlp_spec(spec: Spec, name: str, dims: list[int]) -> None:
    for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
        linear_spec(spec, f"{name}.layers.{i}", a, b)


def count(spec: Spec) -> int:
    return sum(math.prod(shape) for shape, _ in spec.values())


def _rng(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(name.encode())])


def _init_one(name: str, shape: tuple[int, ...], kind: str, seed: int) -> np.ndarray:
    if kind == ZEROS:
        return np.zeros(shape, dtype=np.float32)
    if kind == ONES:
        return np.ones(shape, dtype=np.float32)
    rng = _rng(seed, name)
    if kind == TRUNC_NORMAL:
        x = rng.standard_normal(shape, dtype=np.float32)
        bad = np.abs(x) > 2.0
        while bad.any():
            x[bad] = rng.standard_normal(int(bad.sum()), dtype=np.float32)
            bad = np.abs(x) > 2.0
        return x * np.float32(0.02)
    if kind == HE_UNIFORM:
        fan_in = math.prod(shape[:-1])
        bound = math.sqrt(6.0 / fan_in)
        return rng.uniform(-bound, bound, size=shape).astype(np.float32)
    if kind == SMALL_UNIFORM:
        return rng.uniform(-0.01, 0.01, size=shape).astype(np.float32)
    raise ValueError(f"unknown init kind {kind!r} for {name}")


def init_params(spec: Spec, seed: int) -> dict[str, np.ndarray]:
    return {name: _init_one(name, shape, kind, seed) for name, (shape, kind) in spec.items()}


def sub(params: dict[str, np.ndarray], prefix: str) -> dict[str, np.ndarray]:
    """View of the entries under ``prefix.`` with the prefix stripped."""
    p = prefix + "."
    return {k[len(p):]: v for k, v in params.items() if k.startswith(p)}
