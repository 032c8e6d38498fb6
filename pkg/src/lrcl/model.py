"""The fixed three-part architecture and its persistence.

Encoder: three valid 1D convolutions (kernels 24/16/8, filters 32/64/96),
each followed by relu and dropout, then a global max-pool over time into a
96-wide representation. Projection head: dense 96->256->128->S with relu
between layers and a final per-row L2 normalization. Classifier: dense
96->1024->C.

Checkpoints are binary: 4-byte magic "LRCK", a little-endian uint32 header
length, a UTF-8 JSON header listing (name, shape, dtype, offset) per
tensor plus a config echo and seed, then a payload of concatenated
little-endian float32 blobs. Round trips are bitwise exact.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from . import tensor_core as tc
from .errors import ConfigError, CorruptionError, ShapeError
from .tensor_core import Rng, Tensor

IN_CHANNELS = 3
ENCODER_FILTERS = (32, 64, 96)
ENCODER_KERNELS = (24, 16, 8)
ENCODER_WIDTH = ENCODER_FILTERS[-1]
HEAD_HIDDEN = (256, 128)
DEFAULT_LATENT_SIZE = 96
CLASSIFIER_HIDDEN = 1024
DEFAULT_DROPOUT_RATE = 0.1

# Three valid convolutions eat sum(K - 1) = 45 samples, so 46 is the
# shortest window with a non-empty feature map.
MIN_INPUT_LEN = sum(k - 1 for k in ENCODER_KERNELS) + 1

CHECKPOINT_MAGIC = b"LRCK"

PARAMETER_COUNT_NOTE = (
    "Computed counts follow from the layer sizes; the roughly 146 thousand "
    "parameters sometimes quoted for this encoder+classifier architecture "
    "cannot be reconciled with those sizes (C=11 gives 195,019)."
)


@dataclass
class EncoderParams:
    conv1_w: Tensor
    conv1_b: Tensor
    conv2_w: Tensor
    conv2_b: Tensor
    conv3_w: Tensor
    conv3_b: Tensor
    dropout_rate: float = DEFAULT_DROPOUT_RATE

    def tensors(self) -> dict[str, Tensor]:
        return {
            "conv1_w": self.conv1_w,
            "conv1_b": self.conv1_b,
            "conv2_w": self.conv2_w,
            "conv2_b": self.conv2_b,
            "conv3_w": self.conv3_w,
            "conv3_b": self.conv3_b,
        }

    @property
    def in_channels(self) -> int:
        return self.conv1_w.shape[1]


@dataclass
class HeadParams:
    dense1_w: Tensor
    dense1_b: Tensor
    dense2_w: Tensor
    dense2_b: Tensor
    dense3_w: Tensor
    dense3_b: Tensor

    def tensors(self) -> dict[str, Tensor]:
        return {
            "dense1_w": self.dense1_w,
            "dense1_b": self.dense1_b,
            "dense2_w": self.dense2_w,
            "dense2_b": self.dense2_b,
            "dense3_w": self.dense3_w,
            "dense3_b": self.dense3_b,
        }

    @property
    def latent_size(self) -> int:
        return self.dense3_w.shape[0]


@dataclass
class ClassifierParams:
    dense1_w: Tensor
    dense1_b: Tensor
    dense2_w: Tensor
    dense2_b: Tensor

    def tensors(self) -> dict[str, Tensor]:
        return {
            "dense1_w": self.dense1_w,
            "dense1_b": self.dense1_b,
            "dense2_w": self.dense2_w,
            "dense2_b": self.dense2_b,
        }

    @property
    def n_classes(self) -> int:
        return self.dense2_w.shape[0]


def _he_uniform(rng: Rng, shape: tuple[int, ...], fan_in: int) -> Tensor:
    bound = np.sqrt(6.0 / fan_in)
    data = rng.uniform(-bound, bound, size=shape).astype(np.float32)
    return Tensor(data, requires_grad=True)


def _zeros(shape: tuple[int, ...]) -> Tensor:
    return Tensor(np.zeros(shape, dtype=np.float32), requires_grad=True)


def init_encoder(
    rng: Rng,
    in_channels: int = IN_CHANNELS,
    dropout_rate: float = DEFAULT_DROPOUT_RATE,
) -> EncoderParams:
    """He-uniform weights (bound sqrt(6 / fan_in)), zero biases."""
    f1, f2, f3 = ENCODER_FILTERS
    k1, k2, k3 = ENCODER_KERNELS
    return EncoderParams(
        conv1_w=_he_uniform(rng, (f1, in_channels, k1), in_channels * k1),
        conv1_b=_zeros((f1,)),
        conv2_w=_he_uniform(rng, (f2, f1, k2), f1 * k2),
        conv2_b=_zeros((f2,)),
        conv3_w=_he_uniform(rng, (f3, f2, k3), f2 * k3),
        conv3_b=_zeros((f3,)),
        dropout_rate=dropout_rate,
    )


def init_head(rng: Rng, latent_size: int = DEFAULT_LATENT_SIZE) -> HeadParams:
    if latent_size < 1:
        raise ConfigError(f"latent size must be positive, got {latent_size}")
    h1, h2 = HEAD_HIDDEN
    return HeadParams(
        dense1_w=_he_uniform(rng, (h1, ENCODER_WIDTH), ENCODER_WIDTH),
        dense1_b=_zeros((h1,)),
        dense2_w=_he_uniform(rng, (h2, h1), h1),
        dense2_b=_zeros((h2,)),
        dense3_w=_he_uniform(rng, (latent_size, h2), h2),
        dense3_b=_zeros((latent_size,)),
    )


def init_classifier(rng: Rng, n_classes: int) -> ClassifierParams:
    if n_classes < 2:
        raise ConfigError(f"need at least two classes, got {n_classes}")
    return ClassifierParams(
        dense1_w=_he_uniform(rng, (CLASSIFIER_HIDDEN, ENCODER_WIDTH), ENCODER_WIDTH),
        dense1_b=_zeros((CLASSIFIER_HIDDEN,)),
        dense2_w=_he_uniform(rng, (n_classes, CLASSIFIER_HIDDEN), CLASSIFIER_HIDDEN),
        dense2_b=_zeros((n_classes,)),
    )


def init_params(arch: str, dims: dict, rng: Rng):
    """Dispatching initializer: arch is one of encoder / head / classifier."""
    if arch == "encoder":
        return init_encoder(rng, **dims)
    if arch == "head":
        return init_head(rng, **dims)
    if arch == "classifier":
        return init_classifier(rng, **dims)
    raise ConfigError(f"unknown architecture component '{arch}'")


def encoder_forward(
    params: EncoderParams,
    x: Tensor,
    training: bool = False,
    rng: Rng | None = None,
) -> Tensor:
    """(B, 3, T) windows -> (B, 96) representations.

    Needs T >= MIN_INPUT_LEN so all three valid convolutions are legal.
    Dropout is active only with training=True (then an rng is required).
    """
    if x.data.ndim != 3:
        raise ShapeError(f"encoder input must be (B, C, T), got shape {x.shape}")
    if x.shape[1] != params.in_channels:
        raise ShapeError(
            f"encoder expects {params.in_channels} channels, got {x.shape[1]}"
        )
    if x.shape[2] < MIN_INPUT_LEN:
        raise ShapeError(
            f"encoder input length {x.shape[2]} is below the minimum {MIN_INPUT_LEN}"
        )
    p = params.dropout_rate
    h = x
    for w, b in (
        (params.conv1_w, params.conv1_b),
        (params.conv2_w, params.conv2_b),
        (params.conv3_w, params.conv3_b),
    ):
        h = tc.relu(tc.conv1d(h, w, b))
        h = tc.dropout(h, p, training, rng)
    return tc.global_max_pool_time(h)


def head_forward(params: HeadParams, h: Tensor) -> Tensor:
    """(B, 96) representations -> (B, S) unit-norm contrastive embeddings."""
    z = tc.relu(tc.dense(h, params.dense1_w, params.dense1_b))
    z = tc.relu(tc.dense(z, params.dense2_w, params.dense2_b))
    z = tc.dense(z, params.dense3_w, params.dense3_b)
    return tc.l2_normalize(z)


def classifier_forward(params: ClassifierParams, h: Tensor) -> Tensor:
    """(B, 96) representations -> (B, C) raw logits."""
    out = tc.relu(tc.dense(h, params.dense1_w, params.dense1_b))
    return tc.dense(out, params.dense2_w, params.dense2_b)


# ---------------------------------------------------------------------------
# Parameter accounting
# ---------------------------------------------------------------------------


@dataclass
class ParameterCountReport:
    rows: list[tuple[str, str, int]]  # (component, layer, count)
    totals: dict[str, int]
    note: str = PARAMETER_COUNT_NOTE

    @property
    def grand_total(self) -> int:
        return sum(self.totals.values())

    def format(self) -> str:
        lines = [f"{c:<12} {layer:<10} {n:>10,}" for c, layer, n in self.rows]
        for comp, total in self.totals.items():
            lines.append(f"{comp:<12} {'total':<10} {total:>10,}")
        lines.append(f"{'all':<12} {'total':<10} {self.grand_total:>10,}")
        lines.append(self.note)
        return "\n".join(lines)


def count_parameters(
    encoder: EncoderParams | None = None,
    head: HeadParams | None = None,
    classifier: ClassifierParams | None = None,
) -> ParameterCountReport:
    """Exact per-layer parameter counts for the supplied components."""
    rows: list[tuple[str, str, int]] = []
    totals: dict[str, int] = {}
    for comp_name, comp in (
        ("encoder", encoder),
        ("head", head),
        ("classifier", classifier),
    ):
        if comp is None:
            continue
        per_layer: dict[str, int] = {}
        for name, t in comp.tensors().items():
            layer = name.rsplit("_", 1)[0]
            per_layer[layer] = per_layer.get(layer, 0) + int(t.data.size)
        for layer, n in per_layer.items():
            rows.append((comp_name, layer, n))
        totals[comp_name] = sum(per_layer.values())
    return ParameterCountReport(rows=rows, totals=totals)


# ---------------------------------------------------------------------------
# Checkpoint persistence
# ---------------------------------------------------------------------------


@dataclass
class Checkpoint:
    config: dict
    seed: int
    encoder: EncoderParams | None = None
    head: HeadParams | None = None
    classifier: ClassifierParams | None = None
    extras: dict = field(default_factory=dict)


def _named_tensors(ckpt: Checkpoint) -> Iterator[tuple[str, Tensor]]:
    for group_name, group in (
        ("encoder", ckpt.encoder),
        ("head", ckpt.head),
        ("classifier", ckpt.classifier),
    ):
        if group is None:
            continue
        for name, t in group.tensors().items():
            yield f"{group_name}.{name}", t


def save_checkpoint(
    path,
    config: dict,
    seed: int,
    encoder: EncoderParams | None = None,
    head: HeadParams | None = None,
    classifier: ClassifierParams | None = None,
) -> None:
    ckpt = Checkpoint(config=config, seed=seed, encoder=encoder, head=head,
                      classifier=classifier)
    entries = []
    blobs = []
    offset = 0
    for name, t in _named_tensors(ckpt):
        blob = np.ascontiguousarray(t.data, dtype="<f4").tobytes()
        entries.append(
            {"name": name, "shape": list(t.data.shape), "dtype": "<f4",
             "offset": offset}
        )
        blobs.append(blob)
        offset += len(blob)
    extras = {}
    if encoder is not None:
        extras["encoder.dropout_rate"] = encoder.dropout_rate
    header = {
        "config": config,
        "extras": extras,
        "seed": int(seed),
        "tensors": entries,
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(header_bytes)))
        f.write(header_bytes)
        for blob in blobs:
            f.write(blob)


def _read_framed(path, magic: bytes) -> tuple[dict, bytes]:
    """Shared reader for magic + uint32 header length + JSON + payload."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < len(magic) + 4:
        raise CorruptionError(f"{path}: file too short for a valid header")
    if raw[: len(magic)] != magic:
        raise CorruptionError(
            f"{path}: bad magic {raw[:len(magic)]!r}, expected {magic!r}"
        )
    (header_len,) = struct.unpack_from("<I", raw, len(magic))
    start = len(magic) + 4
    if start + header_len > len(raw):
        raise CorruptionError(f"{path}: truncated header")
    try:
        header = json.loads(raw[start : start + header_len].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptionError(f"{path}: unreadable header ({exc})") from exc
    return header, raw[start + header_len :]


def load_checkpoint(path) -> Checkpoint:
    header, payload = _read_framed(path, CHECKPOINT_MAGIC)
    try:
        entries = header["tensors"]
        config = header["config"]
        seed = int(header["seed"])
        extras = header.get("extras", {})
    except (KeyError, TypeError, ValueError) as exc:
        raise CorruptionError(f"{path}: malformed header ({exc})") from exc

    tensors: dict[str, Tensor] = {}
    spans: list[tuple[int, int, str]] = []
    for entry in entries:
        shape = tuple(int(s) for s in entry["shape"])
        if entry.get("dtype") != "<f4":
            raise CorruptionError(
                f"{path}: unsupported dtype {entry.get('dtype')!r}"
            )
        size = int(np.prod(shape, dtype=np.int64)) * 4 if shape else 4
        begin = int(entry["offset"])
        end = begin + size
        if begin < 0 or end > len(payload):
            raise CorruptionError(
                f"{path}: tensor '{entry['name']}' spans [{begin}, {end}) "
                f"outside the {len(payload)}-byte payload"
            )
        spans.append((begin, end, entry["name"]))
        data = np.frombuffer(payload, dtype="<f4", count=size // 4, offset=begin)
        tensors[entry["name"]] = Tensor(
            data.reshape(shape).copy(), requires_grad=True
        )
    spans.sort()
    for (b0, e0, n0), (b1, e1, n1) in zip(spans, spans[1:]):
        if b1 < e0:
            raise CorruptionError(
                f"{path}: tensors '{n0}' and '{n1}' overlap in the payload"
            )

    def group(prefix: str) -> dict[str, Tensor]:
        return {
            name[len(prefix) + 1 :]: t
            for name, t in tensors.items()
            if name.startswith(prefix + ".")
        }

    ckpt = Checkpoint(config=config, seed=seed, extras=extras)
    enc = group("encoder")
    if enc:
        try:
            ckpt.encoder = EncoderParams(
                dropout_rate=float(extras.get("encoder.dropout_rate",
                                              DEFAULT_DROPOUT_RATE)),
                **enc,
            )
        except TypeError as exc:
            raise CorruptionError(f"{path}: incomplete encoder ({exc})") from exc
    hd = group("head")
    if hd:
        try:
            ckpt.head = HeadParams(**hd)
        except TypeError as exc:
            raise CorruptionError(f"{path}: incomplete head ({exc})") from exc
    clf = group("classifier")
    if clf:
        try:
            ckpt.classifier = ClassifierParams(**clf)
        except TypeError as exc:
            raise CorruptionError(f"{path}: incomplete classifier ({exc})") from exc
    return ckpt


def copy_encoder(params: EncoderParams) -> EncoderParams:
    """Deep copy so finetuning never mutates a shared pretrained encoder."""
    fresh = {n: Tensor(t.data.copy(), requires_grad=True)
             for n, t in params.tensors().items()}
    return EncoderParams(dropout_rate=params.dropout_rate, **fresh)
