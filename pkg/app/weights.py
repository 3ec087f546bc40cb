"""Binary weight container.

Layout: magic ``STRATAW\\0``, little-endian u32 version, u32 header length,
a UTF-8 JSON header ``{"conventions": {...}, "tensors": [{"name", "shape"}]}``
and then each tensor's float32 little-endian payload in header order.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np

from .decoder import DECODER_LAYERS, AttentionWeights, DecoderLayerWeights, DecoderWeights
from .errors import ConfigurationError, WeightFormatError
from .merging import HeadWeights
from .nn import LayerNorm, Linear, Mlp
from .superpoint import GeoPoolWeights

LOGGER = logging.getLogger(__name__)

MAGIC = b"STRATAW\0"
VERSION = 1
PREAMBLE = struct.Struct("<II")
PAYLOAD_DTYPE = np.dtype("<f4")

Tensors = dict[str, np.ndarray]


@dataclass(frozen=True)
class WeightBundle:
    geo_pool: GeoPoolWeights | None = None
    decoder: DecoderWeights | None = None
    heads: HeadWeights | None = None

    @classmethod
    def random(cls, channels: int, num_classes: int, seed: int = 0, contrastive_dim: int | None = None) -> WeightBundle:
        rng = np.random.default_rng(seed)
        return cls(
            geo_pool=GeoPoolWeights(Mlp.random((3, channels, channels), rng), Mlp.random((2 * channels, channels, 1), rng)),
            decoder=DecoderWeights.random(channels, rng),
            heads=HeadWeights.random(channels, contrastive_dim or channels, num_classes, rng),
        )


def _put_linear(out: Tensors, prefix: str, layer: Linear) -> None:
    out[f"{prefix}.weight"] = layer.weight
    out[f"{prefix}.bias"] = layer.bias


def _put_mlp(out: Tensors, prefix: str, mlp: Mlp) -> None:
    for i, layer in enumerate(mlp.layers):
        _put_linear(out, f"{prefix}.{i}", layer)


def flatten(bundle: WeightBundle) -> Tensors:
    out: Tensors = {}
    if bundle.geo_pool is not None:
        _put_mlp(out, "geo_pool.local", bundle.geo_pool.mlp_local)
        _put_mlp(out, "geo_pool.weight", bundle.geo_pool.mlp_weight)
    if bundle.decoder is not None:
        decoder = bundle.decoder
        for l, layer in enumerate(decoder.layers):
            base = f"decoder.layers.{l}"
            for block, attention in (("cross", layer.cross), ("self", layer.self_attn)):
                for proj in "qkvo":
                    _put_linear(out, f"{base}.{block}.{proj}", getattr(attention, proj))
            _put_mlp(out, f"{base}.ffn", layer.ffn)
            for norm in ("cross_norm", "self_norm", "ffn_norm"):
                value = getattr(layer, norm)
                if value is not None:
                    out[f"{base}.{norm}.gamma"] = value.gamma
                    out[f"{base}.{norm}.beta"] = value.beta
        _put_linear(out, "decoder.mask_head", decoder.mask_head)
        if decoder.cls_head is not None:
            _put_linear(out, "decoder.cls_head", decoder.cls_head)
    if bundle.heads is not None:
        for name in ("box", "contrastive", "semantic"):
            head = getattr(bundle.heads, name)
            if head is not None:
                _put_mlp(out, f"heads.{name}", head)
    return out


def _take_linear(tensors: Tensors, prefix: str) -> Linear | None:
    if f"{prefix}.weight" not in tensors:
        return None
    if f"{prefix}.bias" not in tensors:
        raise WeightFormatError(f"tensor {prefix}.bias is missing")
    return Linear(tensors.pop(f"{prefix}.weight"), tensors.pop(f"{prefix}.bias"))


def _require_linear(tensors: Tensors, prefix: str) -> Linear:
    layer = _take_linear(tensors, prefix)
    if layer is None:
        raise WeightFormatError(f"tensor {prefix}.weight is missing")
    return layer


def _take_mlp(tensors: Tensors, prefix: str) -> Mlp | None:
    layers = []
    while (layer := _take_linear(tensors, f"{prefix}.{len(layers)}")) is not None:
        layers.append(layer)
    return Mlp(tuple(layers)) if layers else None


def _take_norm(tensors: Tensors, prefix: str) -> LayerNorm | None:
    if f"{prefix}.gamma" not in tensors:
        if f"{prefix}.beta" in tensors:
            raise WeightFormatError(f"tensor {prefix}.gamma is missing")
        return None
    if f"{prefix}.beta" not in tensors:
        raise WeightFormatError(f"tensor {prefix}.beta is missing")
    return LayerNorm(tensors.pop(f"{prefix}.gamma"), tensors.pop(f"{prefix}.beta"))


def unflatten(tensors: Tensors, conventions: dict[str, Any]) -> WeightBundle:
    tensors = dict(tensors)
    geo_pool = None
    local, weight = _take_mlp(tensors, "geo_pool.local"), _take_mlp(tensors, "geo_pool.weight")
    if (local is None) != (weight is None):
        raise WeightFormatError("geometric pooling needs both the local and the weight MLP")
    if local is not None:
        geo_pool = GeoPoolWeights(local, weight)

    decoder = None
    if "decoder.mask_head.weight" in tensors:
        norm = conventions.get("norm", "pre")
        if norm not in ("pre", "post", "none"):
            raise WeightFormatError(f"unknown norm convention {norm!r}")
        heads = conventions.get("heads", 1)
        if isinstance(heads, bool) or not isinstance(heads, int) or heads < 1:
            raise WeightFormatError(f"head count must be a positive integer, got {heads!r}")
        layers = []
        for l in range(DECODER_LAYERS):
            base = f"decoder.layers.{l}"
            attention = {
                block: AttentionWeights(*(_require_linear(tensors, f"{base}.{block}.{proj}") for proj in "qkvo"))
                for block in ("cross", "self")
            }
            ffn = _take_mlp(tensors, f"{base}.ffn")
            if ffn is None:
                raise WeightFormatError(f"tensor {base}.ffn.0.weight is missing")
            layers.append(
                DecoderLayerWeights(
                    cross=attention["cross"],
                    self_attn=attention["self"],
                    ffn=ffn,
                    cross_norm=_take_norm(tensors, f"{base}.cross_norm"),
                    self_norm=_take_norm(tensors, f"{base}.self_norm"),
                    ffn_norm=_take_norm(tensors, f"{base}.ffn_norm"),
                )
            )
        decoder = DecoderWeights(
            layers=tuple(layers),
            mask_head=_require_linear(tensors, "decoder.mask_head"),
            cls_head=_take_linear(tensors, "decoder.cls_head"),
            norm=norm,
            heads=heads,
        )

    heads_parts = {name: _take_mlp(tensors, f"heads.{name}") for name in ("box", "contrastive", "semantic")}
    heads = HeadWeights(**heads_parts) if any(v is not None for v in heads_parts.values()) else None
    if tensors:
        raise WeightFormatError(f"unrecognized tensors: {sorted(tensors)}")
    return WeightBundle(geo_pool=geo_pool, decoder=decoder, heads=heads)


def save_weights(path: str | Path, bundle: WeightBundle) -> None:
    tensors = flatten(bundle)
    conventions = {"norm": bundle.decoder.norm, "heads": bundle.decoder.heads} if bundle.decoder else {}
    header = json.dumps(
        {
            "conventions": conventions,
            "tensors": [{"name": name, "shape": list(value.shape)} for name, value in tensors.items()],
        }
    ).encode("utf-8")
    with open(path, "wb") as handle:
        handle.write(MAGIC + PREAMBLE.pack(VERSION, len(header)) + header)
        for value in tensors.values():
            handle.write(np.asarray(value, dtype=PAYLOAD_DTYPE).tobytes())


def load_weights(path: str | Path) -> WeightBundle:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise WeightFormatError(f"cannot read weights {path}: {exc}") from exc
    if not data.startswith(MAGIC):
        raise WeightFormatError(f"{path}: bad magic")
    start = len(MAGIC)
    if len(data) < start + PREAMBLE.size:
        raise WeightFormatError(f"{path}: truncated preamble")
    version, header_len = PREAMBLE.unpack_from(data, start)
    if version != VERSION:
        raise WeightFormatError(f"{path}: unsupported version {version}")
    start += PREAMBLE.size
    try:
        header = json.loads(data[start : start + header_len].decode("utf-8"))
        entries = [(str(t["name"]), tuple(int(d) for d in t["shape"])) for t in header["tensors"]]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise WeightFormatError(f"{path}: malformed header: {exc}") from exc
    offset = start + header_len

    tensors: Tensors = {}
    for name, shape in entries:
        size = int(np.prod(shape, dtype=np.int64)) * PAYLOAD_DTYPE.itemsize
        if offset + size > len(data):
            raise WeightFormatError(f"{path}: tensor {name} declares shape {list(shape)} but the payload is short")
        tensors[name] = np.frombuffer(data, dtype=PAYLOAD_DTYPE, count=size // PAYLOAD_DTYPE.itemsize, offset=offset).reshape(shape)
        offset += size
    if offset != len(data):
        raise WeightFormatError(f"{path}: {len(data) - offset} trailing bytes after the last tensor")
    conventions = header.get("conventions", {})
    if not isinstance(conventions, dict):
        raise WeightFormatError(f"{path}: conventions must be a JSON object")
    try:
        bundle = unflatten(tensors, conventions)
    except WeightFormatError:
        raise
    except ConfigurationError as exc:
        raise WeightFormatError(f"{path}: {exc}") from exc
    LOGGER.info("loaded %d tensors from %s", len(entries), path)
    return bundle
