"""Full encoder-decoder assembly with ablation toggles and checkpoints.

Encoder: a ResNet-50-shaped backbone (bottleneck counts 3/4/6/3) whose last
stage ends in an attention-boosting module (AbM5).  Bridge: the dilated
separable network, or a plain 1x1 unit when it is ablated.  Decoder: a
stride-1 deconvolution path fused with the stage-3 skip (AfN1) and a
stride-4 deconvolution path fused with the stage-1 skip (AfN2), depth
concatenated and classified by a 1x1 convolution upsampled to input size.
"""

from __future__ import annotations

import dataclasses
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import blocks
from .blocks import (
    AfNParams,
    BottleneckParams,
    DbNParams,
    LayerParams,
    abm_forward,
    afn_forward,
    bottleneck_forward,
    conv_unit,
    dbn_forward,
    deconv_unit,
)
from .errors import ConfigError, DataError, ShapeError
from .seeding import rng_for
from .tensor import Tensor, concat_channels, conv2d, resize_bilinear

log = logging.getLogger(__name__)

STEM_WIDTH = 64
STAGE_BLOCKS = (3, 4, 6, 3)
STAGE_MID = (64, 128, 256, 512)
STAGE_OUT = (256, 512, 1024, 2048)
STAGE_STRIDE = (1, 2, 2, 2)
BRIDGE_WIDTH = 512
AFN1_WIDTH = 512
AFN2_WIDTH = 512
OUTPUT_STRIDE = 32

TOGGLES = {"AbM5": "enable_abm5", "DbN": "enable_dbn", "AfN1": "enable_afn1", "AfN2": "enable_afn2"}


@dataclass(frozen=True)
class ModelConfig:
    num_classes: int = 11
    width_mult: float = 1.0
    input_hw: tuple[int, int] = (32, 32)
    enable_abm5: bool = True
    enable_dbn: bool = True
    enable_afn1: bool = True
    enable_afn2: bool = True
    seed: int = 0
    abm_all_stages: bool = False
    # recorded architecture decisions; changing them is not supported yet
    skip_taps: tuple[int, int] = (1, 3)
    afn_convs: int = 2
    dbn_dilations: tuple[int, ...] = blocks.DBN_DILATIONS

    def width(self, base: int) -> int:
        c = int(round(base * self.width_mult))
        if c < 1:
            raise ConfigError(f"width_mult={self.width_mult} gives 0 channels for base width {base}")
        return c

    def validate(self) -> None:
        if self.num_classes < 1:
            raise ConfigError(f"num_classes must be positive, got {self.num_classes}")
        if not 0.0 < self.width_mult <= 1.0:
            raise ConfigError(f"width_mult must lie in (0, 1], got {self.width_mult}")
        if any(v < 1 for v in self.input_hw):
            raise ConfigError(f"input_hw must be positive, got {self.input_hw}")
        if tuple(self.skip_taps) != (1, 3) or self.afn_convs != 2:
            raise ConfigError("only skip_taps=(1,3) and afn_convs=2 are implemented")
        for base in (STEM_WIDTH, *STAGE_MID, *STAGE_OUT, BRIDGE_WIDTH, AFN1_WIDTH, AFN2_WIDTH):
            self.width(base)


def ablate(config: ModelConfig, drop: str) -> ModelConfig:
    """Copy of ``config`` with the named toggle (``AbM5``, ``DbN``, ``AfN1``, ``AfN2``) switched off."""
    if drop not in TOGGLES:
        raise ConfigError(f"unknown toggle {drop!r}; expected one of {sorted(TOGGLES)}")
    return dataclasses.replace(config, **{TOGGLES[drop]: False})


@dataclass(eq=False)
class Model:
    config: ModelConfig
    stem: list[LayerParams]
    stages: list[list[BottleneckParams]]
    abms: dict[int, LayerParams]
    bridge: DbNParams | LayerParams
    dec1: LayerParams
    afn1: AfNParams | None
    dec2: LayerParams
    afn2: AfNParams | None
    head: LayerParams
    registry: dict[str, LayerParams] = field(default_factory=dict)

    def parameters(self) -> list[tuple[str, Tensor]]:
        return [kv for p in self.registry.values() for kv in p.learnables()]

    def buffers(self) -> list[tuple[str, np.ndarray]]:
        return [kv for p in self.registry.values() for kv in p.buffers()]

    def zero_grad(self) -> None:
        for _, t in self.parameters():
            t.grad = None

    def __call__(self, x: Tensor, training: bool = False) -> Tensor:
        return forward(self, x, training)


def build(config: ModelConfig) -> Model:
    """Instantiate all parameters; each layer's init is seeded by ``(config.seed, layer id)``.

    Seeding per layer means a layer shared by two ablation variants starts
    from identical weights in both.
    """
    config.validate()
    W = config.width

    def rng(layer_id: str) -> np.random.Generator:
        return rng_for(config.seed, layer_id)

    stem = [
        blocks.make_conv("stem.conv1", 3, W(STEM_WIDTH), 7, rng("stem.conv1")),
        blocks.make_conv("stem.conv2", W(STEM_WIDTH), W(STEM_WIDTH), 3, rng("stem.conv2")),
    ]
    stages, abms = [], {}
    cin = W(STEM_WIDTH)
    for si, (nb, mid, cout, stride) in enumerate(zip(STAGE_BLOCKS, STAGE_MID, STAGE_OUT, STAGE_STRIDE), start=1):
        stage = []
        for bi in range(nb):
            stage.append(
                blocks.make_bottleneck(f"stage{si}.block{bi}", cin, W(mid), W(cout), stride if bi == 0 else 1, rng)
            )
            cin = W(cout)
        stages.append(stage)
        if (si == 4 and config.enable_abm5) or (si < 4 and config.abm_all_stages):
            name = f"abm{si + 1}"
            abms[si] = blocks.make_conv(f"{name}.adapter", W(cout), W(cout), 1, rng(f"{name}.adapter"), bias=True, bn=False)

    enc_out, skip1_ch, skip3_ch = W(STAGE_OUT[3]), W(STAGE_OUT[0]), W(STAGE_OUT[2])
    bw, c1, c2 = W(BRIDGE_WIDTH), W(AFN1_WIDTH), W(AFN2_WIDTH)
    if config.enable_dbn:
        bridge = blocks.make_dbn("dbn", enc_out, bw, rng, config.dbn_dilations)
    else:
        bridge = blocks.make_conv("bridge", enc_out, bw, 1, rng("bridge"))
    dec1 = blocks.make_deconv("dec1.deconv", bw, c1, 3, 1, rng("dec1.deconv"))
    afn1 = blocks.make_afn("afn1", skip3_ch, c1, rng) if config.enable_afn1 else None
    dec2 = blocks.make_deconv("dec2.deconv", c1, c2, 4, 4, rng("dec2.deconv"))
    afn2 = blocks.make_afn("afn2", skip1_ch, c2, rng) if config.enable_afn2 else None
    head = blocks.make_conv("head", c1 + c2, config.num_classes, 1, rng("head"), bias=True, bn=False)

    m = Model(config, stem, stages, abms, bridge, dec1, afn1, dec2, afn2, head)
    layers: list[LayerParams] = list(stem)
    for si, stage in enumerate(stages, start=1):
        for b in stage:
            layers.extend(b.layers())
        if si in abms:
            layers.append(abms[si])
    layers.extend(bridge.layers() if isinstance(bridge, DbNParams) else [bridge])
    layers.append(dec1)
    if afn1 is not None:
        layers.extend(afn1.layers())
    layers.append(dec2)
    if afn2 is not None:
        layers.extend(afn2.layers())
    layers.append(head)
    for p in layers:
        if p.id in m.registry:
            raise ConfigError(f"duplicate layer id {p.id}")
        m.registry[p.id] = p
    return m


def forward(m: Model, x: Tensor, training: bool = False) -> Tensor:
    """Per-pixel class scores of shape (N, num_classes, H, W)."""
    n, c, h, w = x.shape
    if c != 3:
        raise ShapeError(f"model expects 3 input channels, got C={c}")
    if h < OUTPUT_STRIDE or w < OUTPUT_STRIDE or h % OUTPUT_STRIDE or w % OUTPUT_STRIDE:
        raise ShapeError(
            f"input {h}x{w} must be >= {OUTPUT_STRIDE} and divisible by {OUTPUT_STRIDE}; resize it first"
        )
    y = conv_unit(x, m.stem[0], training, stride=2, padding=3)
    y = conv_unit(y, m.stem[1], training, stride=2, padding=1)
    taps = {}
    for si, stage in enumerate(m.stages, start=1):
        gate = None
        for b in stage:
            y, gate = bottleneck_forward(y, b, training, return_gate=True)
        if si in m.abms:
            y = abm_forward(y, gate, m.abms[si])
        taps[si] = y
    skip1, skip3 = taps[1], taps[3]

    if isinstance(m.bridge, DbNParams):
        z = dbn_forward(y, m.bridge, training)
    else:
        z = conv_unit(y, m.bridge, training)

    d1 = deconv_unit(z, m.dec1, stride=1, padding=1, training=training)
    d1 = resize_bilinear(d1, skip3.shape[2], skip3.shape[3])
    if m.afn1 is not None:
        d1 = afn_forward(d1, skip3, m.afn1, training)
    d2 = deconv_unit(d1, m.dec2, stride=4, padding=0, training=training)
    if m.afn2 is not None:
        d2 = afn_forward(d2, skip1, m.afn2, training)
    cat = concat_channels([resize_bilinear(d1, d2.shape[2], d2.shape[3]), d2])
    logits = conv2d(cat, m.head.weight, m.head.bias)
    return resize_bilinear(logits, h, w)


def param_count(m: Model) -> int:
    return int(sum(t.data.size for _, t in m.parameters()))


def param_breakdown(m: Model) -> dict[str, int]:
    """Learnable count per top-level group (stem, stage1..4, abm*, dbn/bridge, dec*, afn*, head)."""
    out: dict[str, int] = {}
    for name, t in m.parameters():
        group = name.split(".", 1)[0]
        out[group] = out.get(group, 0) + t.data.size
    return out


# --------------------------------------------------------------- checkpoint

MAGIC = b"SERK"
VERSION = 1


def _state(m: Model) -> list[tuple[str, np.ndarray]]:
    state = [(k, t.data) for k, t in m.parameters()]
    state += [(k, v.reshape(1, -1, 1, 1)) for k, v in m.buffers()]
    return state


def save_checkpoint(m: Model, path: str | Path) -> None:
    """Write ``SERK`` + u32 version + records (u32 id length, id, 4 x u64 shape, float64 LE payload)."""
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        for key, arr in _state(m):
            kb = key.encode("utf-8")
            fh.write(struct.pack("<I", len(kb)))
            fh.write(kb)
            fh.write(struct.pack("<4Q", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def read_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise DataError(f"{path}: not a checkpoint (bad magic {raw[:4]!r})")
    if len(raw) < 8:
        raise DataError(f"{path}: truncated header")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    pos, out = 8, {}
    while pos < len(raw):
        try:
            (klen,) = struct.unpack_from("<I", raw, pos)
            key = raw[pos + 4 : pos + 4 + klen].decode("utf-8")
            pos += 4 + klen
            shape = struct.unpack_from("<4Q", raw, pos)
            pos += 32
        except (struct.error, UnicodeDecodeError) as exc:
            raise DataError(f"{path}: truncated or corrupt record at byte {pos}") from exc
        nbytes = 8 * int(np.prod(shape))
        if pos + nbytes > len(raw):
            raise DataError(f"{path}: truncated payload for {key}")
        if key in out:
            raise DataError(f"{path}: duplicate record {key}")
        out[key] = np.frombuffer(raw, dtype="<f8", count=nbytes // 8, offset=pos).reshape(shape).astype(np.float64)
        pos += nbytes
    return out


def load_checkpoint(m: Model, path: str | Path) -> None:
    """Copy checkpoint values into ``m``; ids and shapes must match exactly."""
    saved = read_checkpoint(path)
    expected = {k: a.shape for k, a in _state(m)}
    missing = sorted(set(expected) - set(saved))
    extra = sorted(set(saved) - set(expected))
    if missing or extra:
        raise ConfigError(
            f"checkpoint/model config mismatch: missing {missing[:5]}{'...' if len(missing) > 5 else ''}, "
            f"unexpected {extra[:5]}{'...' if len(extra) > 5 else ''}"
        )
    for key, shape in expected.items():
        if saved[key].shape != shape:
            raise ConfigError(f"checkpoint/model config mismatch: {key} has shape {saved[key].shape}, model wants {shape}")
    for key, t in m.parameters():
        t.data[...] = saved[key]
    for key, buf in m.buffers():
        buf[...] = saved[key].reshape(-1)
