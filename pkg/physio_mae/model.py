"""Joint encoder over visible patch tokens with one decoder per signal."""
import hashlib
import logging
from collections import OrderedDict
from contextlib import contextmanager

import numpy as np

from .autodiff import ops
from .autodiff.tensor import Tensor, as_tensor, parameter
from .embedding import (
    embed_signal,
    init_projection,
    init_type_embedding,
    patchify,
    positional_encoding,
)
from .errors import ConfigError, DimensionError, InternalError
from .masking import MaskBatch, MaskIndex, apply_mask
from .utils import derive_rng

MASK_TOKEN_STD = 0.02


def _xavier(rng, fan_in, fan_out):
    scale = np.sqrt(2.0 / (fan_in + fan_out))
    return rng.normal(0.0, scale, (fan_in, fan_out))


def linear(x, weight, bias=None):
    out = ops.matmul(x, weight)
    return ops.add(out, bias) if bias is not None else out


def _split_heads(x, heads):
    batch, length, width = x.shape
    x = ops.reshape(x, (batch, length, heads, width // heads))
    return ops.transpose(x, (0, 2, 1, 3))


def _merge_heads(x):
    batch, heads, length, head_dim = x.shape
    x = ops.transpose(x, (0, 2, 1, 3))
    return ops.reshape(x, (batch, length, heads * head_dim))


def _project(params, prefix, x):
    return linear(x, params[f"{prefix}.weight"], params[f"{prefix}.bias"])


def attention(params, prefix, query, context, heads):
    """Multi-head scaled dot-product attention of ``query`` over
    ``context``; both are ``(B, T, D)``."""
    width = query.shape[-1]
    q = _split_heads(_project(params, f"{prefix}.q", query), heads)
    k = _split_heads(_project(params, f"{prefix}.k", context), heads)
    v = _split_heads(_project(params, f"{prefix}.v", context), heads)
    scores = ops.mul(
        ops.matmul(q, ops.swapaxes(k, -1, -2)),
        1.0 / np.sqrt(width // heads),
    )
    mixed = _merge_heads(ops.matmul(ops.softmax(scores, axis=-1), v))
    return _project(params, f"{prefix}.o", mixed)


def feed_forward(params, prefix, x):
    hidden = ops.gelu(
        linear(x, params[f"{prefix}.w1"], params[f"{prefix}.b1"])
    )
    return linear(hidden, params[f"{prefix}.w2"], params[f"{prefix}.b2"])


def _norm(params, prefix, x):
    return ops.layer_norm(
        x, params[f"{prefix}.gain"], params[f"{prefix}.bias"]
    )


def transformer_block(params, prefix, x, heads, context=None):
    """Post-norm block: residual attention, norm, residual FFN, norm."""
    context = x if context is None else context
    x = _norm(
        params,
        f"{prefix}.norm1",
        ops.add(x, attention(params, f"{prefix}.attn", x, context, heads)),
    )
    return _norm(
        params,
        f"{prefix}.norm2",
        ops.add(x, feed_forward(params, f"{prefix}.ffn", x)),
    )


class ParameterBuilder(object):
    """Registers named leaf tensors in creation order."""

    def __init__(self, rng, dtype):
        self.rng = rng
        self.dtype = dtype
        self.params = OrderedDict()

    def add(self, name, data):
        if name in self.params:
            raise InternalError(f"Duplicate parameter name: {name}")
        self.params[name] = parameter(
            np.asarray(data, dtype=self.dtype), name=name
        )

    def linear(self, prefix, fan_in, fan_out, bias=True):
        self.add(f"{prefix}.weight", _xavier(self.rng, fan_in, fan_out))
        if bias:
            self.add(f"{prefix}.bias", np.zeros(fan_out))

    def norm(self, prefix, width):
        self.add(f"{prefix}.gain", np.ones(width))
        self.add(f"{prefix}.bias", np.zeros(width))

    def attention(self, prefix, width):
        for name in ("q", "k", "v", "o"):
            self.linear(f"{prefix}.{name}", width, width)

    def block(self, prefix, width, ffn_dim):
        self.attention(f"{prefix}.attn", width)
        self.norm(f"{prefix}.norm1", width)
        self.add(f"{prefix}.ffn.w1", _xavier(self.rng, width, ffn_dim))
        self.add(f"{prefix}.ffn.b1", np.zeros(ffn_dim))
        self.add(f"{prefix}.ffn.w2", _xavier(self.rng, ffn_dim, width))
        self.add(f"{prefix}.ffn.b2", np.zeros(width))
        self.norm(f"{prefix}.norm2", width)


class SignalEncoder(object):
    """Patch embedding plus the shared transformer encoder.

    Inputs are arrays ``(B, S, L)`` (or ``(S, L)``) whose rows follow
    ``signals``.
    """

    kind = "encoder"
    log = logging.getLogger(__name__)

    def __init__(
        self,
        patch_config,
        encoder_config,
        model_config,
        signal_std=None,
        seed=0,
    ):
        self.patch_config = patch_config
        self.encoder_config = encoder_config
        self.model_config = model_config
        self.signals = tuple(model_config.signals)
        self.patch_len = patch_config.patch_len
        self.n_patches = patch_config.n_patches
        self.model_dim = encoder_config.model_dim
        self.heads = encoder_config.heads
        self.depth = encoder_config.depth
        self.type_embedding = model_config.type_embedding
        self.dtype = np.dtype(model_config.dtype)
        self.seed = seed
        self.positions = positional_encoding(self.n_patches, self.model_dim)

        builder = ParameterBuilder(derive_rng(seed, "init"), self.dtype)
        for name in self.signals:
            builder.add(
                f"embed.{name}.weight",
                init_projection(self.patch_len, self.model_dim, builder.rng),
            )
            if self.type_embedding:
                std = (signal_std or {}).get(
                    name, model_config.type_embedding_std
                )
                builder.add(
                    f"embed.{name}.type",
                    init_type_embedding(
                        self.n_patches, self.model_dim, std, builder.rng
                    ),
                )
        for layer in range(self.depth):
            builder.block(
                f"encoder.{layer}", self.model_dim, encoder_config.ffn_dim
            )
        self._build_head(builder)
        self.params = builder.params

    def _build_head(self, builder):
        pass

    def named_parameters(self):
        return list(self.params.items())

    def parameters(self):
        return list(self.params.values())

    @property
    def parameter_count(self):
        return int(sum(p.size for p in self.params.values()))

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    @contextmanager
    def frozen(self):
        """Swaps parameters for constants so no graph is recorded."""
        trainable = self.params
        self.params = OrderedDict(
            (name, Tensor(p.data)) for name, p in trainable.items()
        )
        try:
            yield self
        finally:
            self.params = trainable

    def state_dict(self):
        return OrderedDict(
            (name, p.data.copy()) for name, p in self.params.items()
        )

    def load_state_dict(self, state):
        missing = [name for name in self.params if name not in state]
        unexpected = [name for name in state if name not in self.params]
        if missing or unexpected:
            raise DimensionError(
                f"State does not match model: missing {missing}, "
                f"unexpected {unexpected}"
            )
        for name, p in self.params.items():
            value = np.asarray(state[name])
            if value.shape != p.shape:
                raise DimensionError(
                    f"{name}: expected {p.shape}, got {value.shape}"
                )
            p.data = value.astype(self.dtype, copy=True)
        return self

    def _batch(self, x, signals):
        x = np.asarray(x, dtype=self.dtype)
        if x.ndim == 2:
            x = x[None]
        if x.ndim != 3 or x.shape[1] != len(signals):
            raise DimensionError(
                f"Expected input (B, {len(signals)}, L), got {x.shape}"
            )
        return x

    def embed(self, x, signals=None):
        """One ``(B, J, d)`` token grid per signal."""
        signals = self.signals if signals is None else tuple(signals)
        x = self._batch(x, signals)
        grids = []
        for i, name in enumerate(signals):
            if name not in self.signals:
                raise ConfigError(
                    f"Model was built for {list(self.signals)}, not {name}"
                )
            type_embedding = (
                self.params[f"embed.{name}.type"]
                if self.type_embedding
                else None
            )
            grids.append(
                embed_signal(
                    patchify(x[:, i], self.patch_len),
                    self.params[f"embed.{name}.weight"],
                    type_embedding,
                    self.positions,
                )
            )
        return grids

    def encode(self, tokens):
        """Runs the encoder blocks over ``(B, N, d)`` tokens."""
        tokens = as_tensor(tokens)
        if tokens.ndim == 2:
            tokens = ops.reshape(tokens, (1,) + tokens.shape)
        if tokens.shape[1] == 0:
            raise DimensionError("Encoder input has no tokens")
        if tokens.shape[2] != self.model_dim:
            raise DimensionError(
                f"Encoder expects width {self.model_dim}, got "
                f"{tokens.shape[2]}"
            )
        for layer in range(self.depth):
            tokens = transformer_block(
                self.params, f"encoder.{layer}", tokens, self.heads
            )
        return tokens

    def encode_subset(self, x, subset):
        """Encoder output for the unmasked tokens of ``subset`` only."""
        subset = tuple(subset)
        if not subset:
            raise ConfigError("Inference signal subset must not be empty")
        return self.encode(ops.concat(self.embed(x, subset), axis=1))

    def pool(self, encoded):
        if self.model_config.pooling == "first":
            return ops.slice(encoded, np.s_[:, 0, :])
        return ops.mean(encoded, axis=1)

    def descriptor(self):
        return {
            "kind": self.kind,
            "signals": list(self.signals),
            "patch_len": self.patch_len,
            "n_patches": self.n_patches,
            "model_dim": self.model_dim,
            "depth": self.depth,
            "heads": self.heads,
            "type_embedding": self.type_embedding,
        }


class PhysioMAE(SignalEncoder):
    """Masked autoencoder: joint encoding, per-signal decoding."""

    kind = "mae"

    def __init__(
        self,
        patch_config,
        encoder_config,
        decoder_config,
        model_config,
        signal_std=None,
        seed=0,
    ):
        self.decoder_config = decoder_config
        self.decoder_dim = decoder_config.decoder_dim
        self.decoder_heads = decoder_config.heads
        self.decoder_depth = decoder_config.depth
        self.cross_attention = model_config.cross_attention
        if self.decoder_dim > encoder_config.model_dim:
            raise ConfigError(
                f"decoder_dim {self.decoder_dim} exceeds model_dim "
                f"{encoder_config.model_dim}"
            )
        super().__init__(
            patch_config, encoder_config, model_config, signal_std, seed
        )
        self.decoder_positions = positional_encoding(
            self.n_patches, self.decoder_dim
        )

    @classmethod
    def from_config(cls, experiment_config, normalization=None):
        return cls(
            experiment_config.patch,
            experiment_config.encoder,
            experiment_config.decoder,
            experiment_config.model,
            signal_std=normalization.std if normalization else None,
            seed=experiment_config.seed,
        )

    def _build_head(self, builder):
        width = self.decoder_dim
        builder.linear("latent", self.model_dim, width)
        for name in self.signals:
            prefix = f"decoder.{name}"
            builder.add(
                f"{prefix}.mask_token",
                builder.rng.normal(0.0, MASK_TOKEN_STD, width),
            )
            builder.attention(f"{prefix}.cross.attn", width)
            builder.norm(f"{prefix}.cross.norm", width)
            for layer in range(self.decoder_depth):
                builder.block(
                    f"{prefix}.{layer}", width, self.decoder_config.ffn_dim
                )
            builder.linear(f"{prefix}.head", width, self.patch_len)

    def project_latent(self, encoded, counts):
        """Maps encoder output to the decoder width and splits it into
        contiguous per-signal segments of ``counts`` tokens."""
        if sum(counts) != encoded.shape[1]:
            raise InternalError(
                f"Segment counts {list(counts)} do not add up to "
                f"{encoded.shape[1]} tokens"
            )
        latent = _project(self.params, "latent", encoded)
        segments, start = [], 0
        for count in counts:
            window = np.s_[:, start : start + count]
            segments.append(ops.slice(latent, window))
            start += count
        return latent, segments

    def merge_with_mask(self, segment, signal, visible_index, masked_index):
        """Places visible latents at their patch positions and the mask
        token everywhere else, then adds decoder positions."""
        batch = visible_index.shape[0]
        n_visible, n_masked = visible_index.shape[1], masked_index.shape[1]
        if n_visible + n_masked != self.n_patches or (
            segment is not None and segment.shape[1] != n_visible
        ):
            raise InternalError(
                f"{signal}: {n_visible} visible + {n_masked} masked tokens "
                f"do not make {self.n_patches} patches"
            )
        parts = [] if n_visible == 0 else [segment]
        if n_masked:
            mask_token = self.params[f"decoder.{signal}.mask_token"]
            parts.append(
                ops.add(np.zeros((batch, n_masked, 1)), mask_token)
            )
        combined = parts[0] if len(parts) == 1 else ops.concat(parts, axis=1)
        order = np.concatenate([visible_index, masked_index], axis=1)
        merged = ops.take_rows(combined, np.argsort(order, axis=1))
        return ops.add(merged, self.decoder_positions)

    def context_positions(self, mask):
        """Decoder positions of the visible tokens, in encoder order."""
        index = np.concatenate(
            [mask.visible_index(name) for name in self.signals], axis=1
        )
        return self.decoder_positions[index]

    def decode_signal(self, signal, merged, context):
        """Cross-attention over ``context`` (or self-attention when
        disabled), decoder blocks, and a per-token head to patch samples."""
        prefix = f"decoder.{signal}"
        if context is None or context.shape[1] == 0:
            raise ConfigError(
                "At least one visible token is needed to decode"
            )
        source = context if self.cross_attention else merged
        x = _norm(
            self.params,
            f"{prefix}.cross.norm",
            ops.add(
                merged,
                attention(
                    self.params,
                    f"{prefix}.cross.attn",
                    merged,
                    source,
                    self.decoder_heads,
                ),
            ),
        )
        for layer in range(self.decoder_depth):
            x = transformer_block(
                self.params, f"{prefix}.{layer}", x, self.decoder_heads
            )
        patches = linear(
            x,
            self.params[f"{prefix}.head.weight"],
            self.params[f"{prefix}.head.bias"],
        )
        return ops.reshape(
            patches, (patches.shape[0], self.n_patches * self.patch_len)
        )

    def forward(self, x, mask):
        """Reconstructions keyed by signal, each ``(B, L)``.

        ``mask`` is a :class:`MaskBatch`, or a :class:`MaskIndex` for a
        single ``(S, L)`` sample.
        """
        if isinstance(mask, MaskIndex):
            mask = MaskBatch([mask])
        if tuple(mask.signals) != self.signals:
            raise ConfigError(
                f"Mask covers {list(mask.signals)}, model expects "
                f"{list(self.signals)}"
            )
        grids = self.embed(x)
        if grids[0].shape[0] != len(mask):
            raise DimensionError(
                f"Batch of {grids[0].shape[0]} samples with {len(mask)} masks"
            )
        counts = [mask.visible_count(name) for name in self.signals]
        if sum(counts) == 0:
            raise ConfigError("Every input patch is masked")
        visible = [
            grid
            for grid, count in zip(apply_mask(grids, mask), counts)
            if count
        ]
        encoded = self.encode(ops.concat(visible, axis=1))
        context, segments = self.project_latent(encoded, counts)
        context = ops.add(context, self.context_positions(mask))
        outputs = OrderedDict()
        for name, segment, count in zip(self.signals, segments, counts):
            merged = self.merge_with_mask(
                segment if count else None,
                name,
                mask.visible_index(name),
                mask.masked_index(name),
            )
            outputs[name] = self.decode_signal(name, merged, context)
        return outputs

    def reconstruct(self, x, mask):
        """Forward pass without graph bookkeeping; numpy ``(B, L)`` arrays."""
        with self.frozen():
            outputs = self.forward(x, mask)
        return OrderedDict((k, v.data) for k, v in outputs.items())

    def descriptor(self):
        descriptor = super().descriptor()
        descriptor.update(
            decoder_dim=self.decoder_dim,
            decoder_depth=self.decoder_depth,
            decoder_heads=self.decoder_heads,
            cross_attention=self.cross_attention,
        )
        return descriptor


class SupervisedModel(SignalEncoder):
    """Encoder plus a single affine head on pooled tokens."""

    kind = "supervised"
    target_scale = (0.0, 1.0)

    def __init__(
        self,
        patch_config,
        encoder_config,
        model_config,
        n_outputs=1,
        signal_std=None,
        seed=0,
    ):
        self.n_outputs = n_outputs
        super().__init__(
            patch_config, encoder_config, model_config, signal_std, seed
        )

    def _build_head(self, builder):
        builder.linear("head", self.model_dim, self.n_outputs)

    def forward(self, x):
        pooled = self.pool(self.encode_subset(x, self.signals))
        out = _project(self.params, "head", pooled)
        if self.n_outputs == 1:
            return ops.reshape(out, (out.shape[0],))
        return out


def encoder_checksum(model):
    """Digest of the embedding and encoder weights."""
    digest = hashlib.sha256()
    for name, p in model.params.items():
        if name.startswith(("embed.", "encoder.")):
            digest.update(name.encode("utf-8"))
            digest.update(np.ascontiguousarray(p.data).tobytes())
    return digest.hexdigest()
