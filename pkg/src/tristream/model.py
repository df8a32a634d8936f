"""Three-stream model assembly, FLOPs accounting, and checkpoint I/O.

Streams (fused in this fixed order):
  A  bidirectional TCN                     -> 2 * filters channels
  B  conv -> separable conv -> SE          -> sep_filters channels
  C  TCN -> BiLSTM                         -> hidden (sum) or 2*hidden (concat)

Each stream ends in global average pooling over time; the pooled features
concatenate to the fused vector, pass through dropout and (optionally) a
channel-attention gate, and a dense layer produces the class logits.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from .conv import Conv1dKernel, conv1d_causal
from .errors import ConfigError, DataError, NumericError
from .layers import (ChannelAttentionParams, LstmParams, SeBlockParams,
                     SeparableParams, TcnBlockParams, avg_pool_time, bilstm,
                     bitcn, channel_attention, dense, dropout, se_block,
                     separable_stack, tcn_stack)
from .rng import RngState
from .tensor import Tensor, as_tensor, concat_channels, relu

CHECKPOINT_MAGIC = b"TSW1"


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass
class StreamAConfig:
    """Bi-TCN stream: `filters` per direction, one residual block per dilation."""

    filters: int = 32
    kernel: int = 3
    dilations: tuple[int, ...] = (1,)


@dataclass
class StreamBConfig:
    """Conv -> separable conv -> SE stream."""

    conv_filters: int = 2
    kernel: int = 3
    sep_filters: int = 32
    se_ratio: int = 4
    se_gate: str = "sigmoid"


@dataclass
class StreamCConfig:
    """TCN -> BiLSTM stream."""

    tcn_filters: int = 32
    kernel: int = 3
    dilations: tuple[int, ...] = (1,)
    lstm_hidden: int = 32
    combine: str = "sum"


@dataclass
class ModelConfig:
    channels: int = 12
    window: int = 500
    num_classes: int = 6
    stream_a: StreamAConfig = field(default_factory=StreamAConfig)
    stream_b: StreamBConfig = field(default_factory=StreamBConfig)
    stream_c: StreamCConfig = field(default_factory=StreamCConfig)
    dropout: float = 0.2
    attention_ratio: int = 4


@dataclass
class AblationFlags:
    """Component switches for the ablation harness; at least one stream on."""

    stream_a: bool = True
    stream_b: bool = True
    stream_c: bool = True
    attention: bool = True


def tiny_config(channels: int = 2, window: int = 8, num_classes: int = 3) -> ModelConfig:
    """Small widths for gradient checking (parameter count < 1000)."""
    return ModelConfig(
        channels=channels, window=window, num_classes=num_classes,
        stream_a=StreamAConfig(filters=3, kernel=3, dilations=(1,)),
        stream_b=StreamBConfig(conv_filters=2, kernel=3, sep_filters=4, se_ratio=2),
        stream_c=StreamCConfig(tcn_filters=4, kernel=3, dilations=(1,),
                               lstm_hidden=4, combine="sum"),
        dropout=0.2, attention_ratio=2)


def fused_width(config: ModelConfig, flags: AblationFlags) -> int:
    width = 0
    if flags.stream_a:
        width += 2 * config.stream_a.filters
    if flags.stream_b:
        width += config.stream_b.sep_filters
    if flags.stream_c:
        c = config.stream_c
        width += c.lstm_hidden * (2 if c.combine == "concat" else 1)
    return width


def validate_config(config: ModelConfig, flags: AblationFlags) -> list[str]:
    """All violations, empty when the pair is buildable."""
    bad = []
    if config.channels < 1:
        bad.append(f"channels must be positive, got {config.channels}")
    if config.window < 1:
        bad.append(f"window must be positive, got {config.window}")
    if config.num_classes < 2:
        bad.append(f"num_classes must be >= 2, got {config.num_classes}")
    if not 0.0 <= config.dropout < 1.0:
        bad.append(f"dropout must be in [0, 1), got {config.dropout}")
    if not (flags.stream_a or flags.stream_b or flags.stream_c):
        bad.append("at least one stream must be enabled")
    a, b, c = config.stream_a, config.stream_b, config.stream_c
    for tag, filters, kernel in (("stream_a", a.filters, a.kernel),
                                 ("stream_c", c.tcn_filters, c.kernel)):
        if filters < 1:
            bad.append(f"{tag}: filters must be positive")
        if kernel < 1:
            bad.append(f"{tag}: kernel must be positive")
    for tag, dil in (("stream_a", a.dilations), ("stream_c", c.dilations)):
        if not dil or any(d < 1 for d in dil):
            bad.append(f"{tag}: dilations must be a non-empty list of positives")
    if b.conv_filters < 1 or b.sep_filters < 1 or b.kernel < 1:
        bad.append("stream_b: filter and kernel counts must be positive")
    if b.se_ratio < 1 or b.sep_filters % b.se_ratio != 0:
        bad.append(f"stream_b: se_ratio {b.se_ratio} must divide "
                   f"sep_filters {b.sep_filters}")
    if b.se_gate not in ("sigmoid", "relu"):
        bad.append(f"stream_b: se_gate must be sigmoid or relu, got {b.se_gate!r}")
    if c.lstm_hidden < 1:
        bad.append("stream_c: lstm_hidden must be positive")
    if c.combine not in ("sum", "concat"):
        bad.append(f"stream_c: combine must be sum or concat, got {c.combine!r}")
    if flags.attention:
        width = fused_width(config, flags)
        if config.attention_ratio < 1 or (width and width % config.attention_ratio != 0):
            bad.append(f"attention_ratio {config.attention_ratio} must divide "
                       f"fused width {width}")
    return bad


def config_to_dict(config: ModelConfig) -> dict:
    d = asdict(config)
    d["stream_a"]["dilations"] = list(config.stream_a.dilations)
    d["stream_c"]["dilations"] = list(config.stream_c.dilations)
    return d


def config_from_dict(d: dict) -> ModelConfig:
    try:
        a = dict(d["stream_a"]); a["dilations"] = tuple(a["dilations"])
        b = dict(d["stream_b"])
        c = dict(d["stream_c"]); c["dilations"] = tuple(c["dilations"])
        return ModelConfig(channels=d["channels"], window=d["window"],
                           num_classes=d["num_classes"],
                           stream_a=StreamAConfig(**a), stream_b=StreamBConfig(**b),
                           stream_c=StreamCConfig(**c), dropout=d["dropout"],
                           attention_ratio=d["attention_ratio"])
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"malformed model config: {exc}") from exc


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------


@dataclass
class BitcnStream:
    fwd: list[TcnBlockParams]
    bwd: list[TcnBlockParams]


@dataclass
class ConvSeStream:
    conv: Conv1dKernel
    sep: SeparableParams
    se: SeBlockParams


@dataclass
class TcnLstmStream:
    blocks: list[TcnBlockParams]
    lstm_f: LstmParams
    lstm_b: LstmParams
    combine: str


@dataclass
class ModelParams:
    """Typed parameter tree plus the flat name -> Tensor registry that the
    optimizer and checkpoint writer iterate (insertion-ordered)."""

    named: dict[str, Tensor]
    stream_a: BitcnStream | None
    stream_b: ConvSeStream | None
    stream_c: TcnLstmStream | None
    attention: ChannelAttentionParams | None
    classifier_w: Tensor
    classifier_b: Tensor

    def count(self) -> int:
        return sum(t.size for t in self.named.values())


class _Registry:
    """Creates named leaves with He-style fan-in-scaled uniform init."""

    def __init__(self, rng: RngState):
        self.rng = rng
        self.named: dict[str, Tensor] = {}

    def weight(self, name: str, shape: tuple, fan_in: int) -> Tensor:
        limit = float(np.sqrt(6.0 / fan_in))
        t = Tensor(self.rng.uniform_range(-limit, limit, shape),
                   requires_grad=True, name=name)
        return self._put(name, t)

    def zeros(self, name: str, shape: tuple) -> Tensor:
        t = Tensor(np.zeros(shape), requires_grad=True, name=name)
        return self._put(name, t)

    def _put(self, name: str, t: Tensor) -> Tensor:
        if name in self.named:
            raise ConfigError(f"duplicate parameter name {name!r}")
        self.named[name] = t
        return t


def _build_tcn_blocks(reg: _Registry, prefix: str, in_channels: int, filters: int,
                      kernel: int, dilations: tuple[int, ...]) -> list[TcnBlockParams]:
    blocks = []
    ch = in_channels
    for i, d in enumerate(dilations):
        base = f"{prefix}.block{i}"
        conv1 = Conv1dKernel(
            reg.weight(f"{base}.conv1.weights", (filters, ch, kernel), ch * kernel),
            reg.zeros(f"{base}.conv1.bias", (filters,)), dilation=d)
        conv2 = Conv1dKernel(
            reg.weight(f"{base}.conv2.weights", (filters, filters, kernel),
                       filters * kernel),
            reg.zeros(f"{base}.conv2.bias", (filters,)), dilation=d)
        proj = None
        if ch != filters:
            proj = Conv1dKernel(
                reg.weight(f"{base}.proj.weights", (filters, ch, 1), ch),
                reg.zeros(f"{base}.proj.bias", (filters,)), dilation=1)
        blocks.append(TcnBlockParams(conv1, conv2, proj))
        ch = filters
    return blocks


def _build_lstm(reg: _Registry, prefix: str, input_size: int, hidden: int) -> LstmParams:
    return LstmParams(
        reg.weight(f"{prefix}.wx", (4 * hidden, input_size), input_size),
        reg.weight(f"{prefix}.wh", (4 * hidden, hidden), hidden),
        reg.zeros(f"{prefix}.bias", (4 * hidden,)))


def build(config: ModelConfig, flags: AblationFlags, rng: RngState) -> ModelParams:
    """Deterministic parameter construction; same seed, same bits.

    Raises ConfigError listing every violation when the configuration is
    invalid.  Disabled components register no parameters.
    """
    violations = validate_config(config, flags)
    if violations:
        raise ConfigError("invalid configuration:\n  " + "\n  ".join(violations))
    reg = _Registry(rng)
    stream_a = stream_b = stream_c = attention = None

    if flags.stream_a:
        a = config.stream_a
        stream_a = BitcnStream(
            fwd=_build_tcn_blocks(reg, "stream_a.fwd", config.channels, a.filters,
                                  a.kernel, a.dilations),
            bwd=_build_tcn_blocks(reg, "stream_a.bwd", config.channels, a.filters,
                                  a.kernel, a.dilations))
    if flags.stream_b:
        b = config.stream_b
        conv = Conv1dKernel(
            reg.weight("stream_b.conv.weights",
                       (b.conv_filters, config.channels, b.kernel),
                       config.channels * b.kernel),
            reg.zeros("stream_b.conv.bias", (b.conv_filters,)), dilation=1)
        sep = SeparableParams(
            depthwise=reg.weight("stream_b.sep.depthwise",
                                 (b.conv_filters, b.kernel), b.kernel),
            pointwise=Conv1dKernel(
                reg.weight("stream_b.sep.pointwise.weights",
                           (b.sep_filters, b.conv_filters, 1), b.conv_filters),
                reg.zeros("stream_b.sep.pointwise.bias", (b.sep_filters,)),
                dilation=1),
            dilation=1)
        hidden = b.sep_filters // b.se_ratio
        se = SeBlockParams(
            y1=reg.weight("stream_b.se.y1", (b.sep_filters, hidden), b.sep_filters),
            y2=reg.weight("stream_b.se.y2", (hidden, b.sep_filters), hidden),
            ratio=b.se_ratio, gate=b.se_gate)
        stream_b = ConvSeStream(conv, sep, se)
    if flags.stream_c:
        c = config.stream_c
        blocks = _build_tcn_blocks(reg, "stream_c.tcn", config.channels,
                                   c.tcn_filters, c.kernel, c.dilations)
        stream_c = TcnLstmStream(
            blocks=blocks,
            lstm_f=_build_lstm(reg, "stream_c.lstm_f", c.tcn_filters, c.lstm_hidden),
            lstm_b=_build_lstm(reg, "stream_c.lstm_b", c.tcn_filters, c.lstm_hidden),
            combine=c.combine)

    width = fused_width(config, flags)
    if flags.attention:
        hidden = width // config.attention_ratio
        attention = ChannelAttentionParams(
            y1=reg.weight("attention.y1", (width, hidden), width),
            y2=reg.weight("attention.y2", (hidden, width), hidden),
            ratio=config.attention_ratio)
    classifier_w = reg.weight("classifier.weights", (config.num_classes, width), width)
    classifier_b = reg.zeros("classifier.bias", (config.num_classes,))

    return ModelParams(named=reg.named, stream_a=stream_a, stream_b=stream_b,
                       stream_c=stream_c, attention=attention,
                       classifier_w=classifier_w, classifier_b=classifier_b)


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------


def _check_finite(tag: str, t: Tensor) -> Tensor:
    if not np.all(np.isfinite(t.data)):
        raise NumericError(f"non-finite activation leaving layer '{tag}'")
    return t


def forward(params: ModelParams, config: ModelConfig, flags: AblationFlags,
            batch, mode: str = "eval", rng: RngState | None = None) -> Tensor:
    """Logits [B, K] for a batch [B, C, T].

    Train mode activates dropout (requires `rng`); eval mode is deterministic.
    Disabled streams are skipped entirely; with attention disabled the fused
    vector feeds the classifier directly.
    """
    x = as_tensor(batch)
    if x.ndim != 3 or x.shape[1] != config.channels:
        raise DataError(f"batch shape {x.shape} does not match config "
                        f"[B, {config.channels}, T]")
    feats = []
    if flags.stream_a:
        h = _check_finite("stream_a.bitcn", bitcn(x, params.stream_a.fwd,
                                                  params.stream_a.bwd))
        feats.append(avg_pool_time(h))
    if flags.stream_b:
        sb = params.stream_b
        h = relu(conv1d_causal(x, sb.conv))
        h = separable_stack(h, sb.sep)
        h = _check_finite("stream_b.se", se_block(h, sb.se))
        feats.append(avg_pool_time(h))
    if flags.stream_c:
        sc = params.stream_c
        h = tcn_stack(x, sc.blocks)
        h = _check_finite("stream_c.bilstm", bilstm(h, sc.lstm_f, sc.lstm_b,
                                                    sc.combine))
        feats.append(avg_pool_time(h))

    fused = concat_channels(feats, batched=True)
    fused = dropout(fused, config.dropout, mode, rng)
    if flags.attention:
        fused = _check_finite("attention", channel_attention(fused, params.attention))
    return _check_finite("classifier", dense(fused, params.classifier_w,
                                             params.classifier_b))


# ---------------------------------------------------------------------------
# FLOPs accounting
# ---------------------------------------------------------------------------


@dataclass
class FlopsEntry:
    name: str
    flops: int
    per_timestep: bool


@dataclass
class FlopsReport:
    """Analytic multiply-add counts (one MAC = 2 ops).

    `total` is the streaming cost: the sum of terms that scale with the
    input length, which is exactly linear in T.  The fixed-size head (SE
    excitation, channel attention, classifier) runs once per window
    regardless of length and is tallied in `fixed_total`.
    """

    input_len: int
    entries: list[FlopsEntry]

    @property
    def total(self) -> int:
        return sum(e.flops for e in self.entries if e.per_timestep)

    @property
    def fixed_total(self) -> int:
        return sum(e.flops for e in self.entries if not e.per_timestep)

    @property
    def combined_total(self) -> int:
        return self.total + self.fixed_total

    def table(self) -> str:
        width = max(len(e.name) for e in self.entries)
        lines = [f"{e.name:<{width}}  {e.flops:>14,}  "
                 f"{'per-timestep' if e.per_timestep else 'fixed'}"
                 for e in self.entries]
        lines.append(f"{'total (scales with T)':<{width}}  {self.total:>14,}")
        lines.append(f"{'fixed head':<{width}}  {self.fixed_total:>14,}")
        lines.append(f"{'combined':<{width}}  {self.combined_total:>14,}")
        lines.append(f"MFLOPs at T={self.input_len}: "
                     f"{self.combined_total / 1e6:.3f} "
                     f"({self.total / 1e6:.3f} streaming + "
                     f"{self.fixed_total / 1e6:.3f} fixed)")
        return "\n".join(lines)


def _conv_flops(c_out: int, c_in: int, kernel: int, T: int) -> int:
    return 2 * c_out * c_in * kernel * T


def _tcn_block_entries(name: str, in_ch: int, filters: int, kernel: int,
                       T: int) -> list[FlopsEntry]:
    entries = [FlopsEntry(f"{name}.conv1", _conv_flops(filters, in_ch, kernel, T), True),
               FlopsEntry(f"{name}.relu1", filters * T, True),
               FlopsEntry(f"{name}.conv2", _conv_flops(filters, filters, kernel, T), True)]
    if in_ch != filters:
        entries.append(FlopsEntry(f"{name}.proj", _conv_flops(filters, in_ch, 1, T), True))
    entries.append(FlopsEntry(f"{name}.residual_add", filters * T, True))
    entries.append(FlopsEntry(f"{name}.relu2", filters * T, True))
    return entries


def _stack_entries(name: str, in_ch: int, filters: int, kernel: int,
                   dilations: tuple[int, ...], T: int) -> list[FlopsEntry]:
    entries = []
    ch = in_ch
    for i in range(len(dilations)):
        entries.extend(_tcn_block_entries(f"{name}.block{i}", ch, filters, kernel, T))
        ch = filters
    return entries


def _lstm_entries(name: str, input_size: int, hidden: int, T: int) -> list[FlopsEntry]:
    gate_affine = 4 * (2 * hidden * input_size + 2 * hidden * hidden + hidden)
    pointwise = 9 * hidden  # 4 gate nonlinearities + cell update + output
    return [FlopsEntry(name, (gate_affine + pointwise) * T, True)]


def count_flops(config: ModelConfig, flags: AblationFlags, input_len: int) -> FlopsReport:
    """Per-layer analytic counts for one window of length `input_len`."""
    violations = validate_config(config, flags)
    if violations:
        raise ConfigError("invalid configuration:\n  " + "\n  ".join(violations))
    T = input_len
    C = config.channels
    entries: list[FlopsEntry] = []
    if flags.stream_a:
        a = config.stream_a
        for direction in ("fwd", "bwd"):
            entries.extend(_stack_entries(f"stream_a.{direction}", C, a.filters,
                                          a.kernel, a.dilations, T))
        entries.append(FlopsEntry("stream_a.pool", 2 * a.filters * T, True))
    if flags.stream_b:
        b = config.stream_b
        entries.append(FlopsEntry("stream_b.conv",
                                  _conv_flops(b.conv_filters, C, b.kernel, T), True))
        entries.append(FlopsEntry("stream_b.conv.relu", b.conv_filters * T, True))
        entries.append(FlopsEntry("stream_b.sep.depthwise",
                                  2 * b.conv_filters * b.kernel * T, True))
        entries.append(FlopsEntry("stream_b.sep.pointwise",
                                  2 * b.sep_filters * b.conv_filters * T, True))
        entries.append(FlopsEntry("stream_b.sep.relu", b.sep_filters * T, True))
        hidden = b.sep_filters // b.se_ratio
        entries.append(FlopsEntry("stream_b.se.squeeze", b.sep_filters * T, True))
        entries.append(FlopsEntry("stream_b.se.excite",
                                  4 * b.sep_filters * hidden + hidden + b.sep_filters,
                                  False))
        entries.append(FlopsEntry("stream_b.se.scale", b.sep_filters * T, True))
        entries.append(FlopsEntry("stream_b.pool", b.sep_filters * T, True))
    if flags.stream_c:
        c = config.stream_c
        entries.extend(_stack_entries("stream_c.tcn", C, c.tcn_filters, c.kernel,
                                      c.dilations, T))
        entries.extend(_lstm_entries("stream_c.lstm_f", c.tcn_filters,
                                     c.lstm_hidden, T))
        entries.extend(_lstm_entries("stream_c.lstm_b", c.tcn_filters,
                                     c.lstm_hidden, T))
        if c.combine == "sum":
            entries.append(FlopsEntry("stream_c.combine", c.lstm_hidden * T, True))
        out_ch = c.lstm_hidden * (2 if c.combine == "concat" else 1)
        entries.append(FlopsEntry("stream_c.pool", out_ch * T, True))

    width = fused_width(config, flags)
    if flags.attention:
        hidden = width // config.attention_ratio
        entries.append(FlopsEntry("attention",
                                  4 * width * hidden + hidden + 2 * width, False))
    entries.append(FlopsEntry("classifier", 2 * config.num_classes * width, False))
    return FlopsReport(input_len=T, entries=entries)


# ---------------------------------------------------------------------------
# checkpoint I/O
# ---------------------------------------------------------------------------


def save_checkpoint(params: ModelParams, config: ModelConfig, path) -> None:
    """TSW1 container: magic, u32 LE header length, canonical JSON header
    {format_version, config, manifest}, then float64 LE payloads in manifest
    order.  Canonical JSON makes save -> load -> save byte-identical."""
    manifest = [{"name": name, "shape": list(t.shape)}
                for name, t in params.named.items()]
    header = {"format_version": 1, "config": config_to_dict(config),
              "manifest": manifest}
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for t in params.named.values():
            f.write(t.data.astype("<f8").tobytes())


def _flags_from_manifest(names: list[str]) -> AblationFlags:
    return AblationFlags(
        stream_a=any(n.startswith("stream_a.") for n in names),
        stream_b=any(n.startswith("stream_b.") for n in names),
        stream_c=any(n.startswith("stream_c.") for n in names),
        attention=any(n.startswith("attention.") for n in names))


def load_checkpoint(path) -> tuple[ModelParams, ModelConfig, AblationFlags]:
    """Strict reader: wrong magic, truncation, or any disagreement between
    the manifest and the config-derived parameter shapes is a DataError."""
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise DataError(f"bad magic {raw[:4]!r}, expected {CHECKPOINT_MAGIC!r}")
    if len(raw) < 8:
        raise DataError("truncated checkpoint: missing header length")
    (hlen,) = struct.unpack("<I", raw[4:8])
    if len(raw) < 8 + hlen:
        raise DataError(f"truncated checkpoint header: expected {hlen} bytes, "
                        f"have {len(raw) - 8}")
    try:
        header = json.loads(raw[8:8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"unreadable checkpoint header: {exc}") from exc
    if header.get("format_version") != 1:
        raise DataError(f"unsupported format_version {header.get('format_version')!r}")
    config = config_from_dict(header["config"])
    manifest = header["manifest"]
    names = [entry["name"] for entry in manifest]
    flags = _flags_from_manifest(names)

    params = build(config, flags, RngState(0))
    built = [(name, list(t.shape)) for name, t in params.named.items()]
    stated = [(entry["name"], list(entry["shape"])) for entry in manifest]
    if built != stated:
        raise DataError("manifest disagrees with config-derived parameters; "
                        f"first difference: {_first_diff(stated, built)}")

    payload = raw[8 + hlen:]
    expected = sum(int(np.prod(entry["shape"])) * 8 for entry in manifest)
    if len(payload) != expected:
        raise DataError(f"payload size mismatch: expected {expected} bytes, "
                        f"found {len(payload)}")
    offset = 0
    for entry in manifest:
        n = int(np.prod(entry["shape"]))
        values = np.frombuffer(payload, dtype="<f8", count=n, offset=offset)
        params.named[entry["name"]].data = values.reshape(entry["shape"]).copy()
        offset += n * 8
    return params, config, flags


def _first_diff(a: list, b: list):
    for x, y in zip(a, b):
        if x != y:
            return f"{x} vs {y}"
    return f"lengths {len(a)} vs {len(b)}"
