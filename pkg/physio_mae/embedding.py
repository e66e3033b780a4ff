"""Patch tokens: per-signal projection, type embedding and positions."""
from functools import lru_cache

import numpy as np

from .autodiff import ops
from .autodiff.tensor import as_tensor
from .errors import ConfigError, DimensionError

POSITION_BASE = 10000.0


def patchify(signal, patch_len):
    """Splits the last axis into ``J`` consecutive patches of ``patch_len``.

    ``(..., L)`` becomes ``(..., J, patch_len)``.
    """
    signal = np.asarray(signal)
    length = signal.shape[-1]
    if patch_len < 1 or length % patch_len != 0:
        raise DimensionError(
            f"Signal length {length} is not divisible by patch length "
            f"{patch_len}"
        )
    return signal.reshape(
        signal.shape[:-1] + (length // patch_len, patch_len)
    )


def unpatchify(patches):
    patches = np.asarray(patches)
    return patches.reshape(patches.shape[:-2] + (-1,))


@lru_cache(maxsize=32)
def _positional_table(n_positions, dim):
    positions = np.arange(n_positions, dtype=np.float64)[:, None]
    even = np.arange(0, dim, 2, dtype=np.float64)
    angles = positions / np.power(POSITION_BASE, even / dim)
    table = np.empty((n_positions, dim), dtype=np.float64)
    table[:, 0::2] = np.sin(angles)
    table[:, 1::2] = np.cos(angles)
    table.setflags(write=False)
    return table


def positional_encoding(n_positions, dim):
    """Fixed sinusoidal table of shape ``(n_positions, dim)``."""
    if dim < 2 or dim % 2 != 0:
        raise ConfigError(
            f"Sinusoidal positional encoding needs an even width, got {dim}"
        )
    return _positional_table(int(n_positions), int(dim)).copy()


def init_projection(patch_len, dim, rng):
    scale = np.sqrt(2.0 / (patch_len + dim))
    return rng.normal(0.0, scale, size=(patch_len, dim))


def init_type_embedding(n_patches, dim, std, rng):
    """Zero-mean Gaussian ``J x d`` table with standard deviation ``std``."""
    if std < 0:
        raise ConfigError(f"Type embedding std must be >= 0, got {std}")
    return rng.normal(0.0, std, size=(n_patches, dim))


def embed_signal(patches, projection, type_embedding, positions):
    """Tokens ``patches @ projection + type_embedding + positions``.

    ``patches`` is ``(J, patch_len)`` or ``(B, J, patch_len)``;
    ``type_embedding`` may be ``None`` when the model runs without one.
    """
    patches = as_tensor(patches)
    projection = as_tensor(projection)
    if patches.shape[-1] != projection.shape[0]:
        raise DimensionError(
            f"Patch length {patches.shape[-1]} does not match projection "
            f"{projection.shape}"
        )
    tokens = ops.matmul(patches, projection)
    if type_embedding is not None:
        tokens = ops.embedding_add(tokens, type_embedding)
    return ops.embedding_add(tokens, positions)
