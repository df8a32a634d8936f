"""Network building blocks: residual TCN blocks and stacks, the bidirectional
TCN, the depthwise-separable stack, squeeze-excite channel recalibration,
LSTM / BiLSTM scans, dense, dropout, and the fused-feature channel attention.

Shapes follow the channel-major convention of `tensor`: signals are [C, T] or
[B, C, T]; pooled feature vectors are [C] or [B, C].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .conv import Conv1dKernel, conv1d_causal, depthwise_conv1d
from .errors import ShapeError
from .rng import RngState
from .tensor import (Tensor, _result, _sigmoid, add, as_tensor, avg_pool_time,
                     concat_channels, matmul, mul, relu, reverse_time,
                     scale_channels, sigmoid)

# ---------------------------------------------------------------------------
# residual TCN
# ---------------------------------------------------------------------------


@dataclass
class TcnBlockParams:
    """One residual block: two dilated causal convs sharing a dilation, plus a
    1x1 projection present exactly when input and output channels differ."""

    conv1: Conv1dKernel
    conv2: Conv1dKernel
    projection: Conv1dKernel | None = None

    def __post_init__(self):
        if self.conv1.dilation != self.conv2.dilation:
            raise ShapeError("residual block convs must share a dilation")
        if self.conv2.in_channels != self.conv1.out_channels:
            raise ShapeError("conv2 input channels must match conv1 output channels")
        needs_proj = self.conv1.in_channels != self.conv2.out_channels
        if needs_proj and self.projection is None:
            raise ShapeError("channel-changing block requires a 1x1 projection")
        if not needs_proj and self.projection is not None:
            raise ShapeError("projection only allowed when channel counts differ")

    @property
    def in_channels(self) -> int:
        return self.conv1.in_channels

    @property
    def out_channels(self) -> int:
        return self.conv2.out_channels

    @property
    def dilation(self) -> int:
        return self.conv1.dilation

    @property
    def kernel_size(self) -> int:
        return self.conv1.kernel_size


def tcn_block(x, p: TcnBlockParams) -> Tensor:
    """ReLU(shortcut(x) + conv2(ReLU(conv1(x)))).

    The shortcut is the identity when channel counts match, else the 1x1
    projection; the sum keeps gradients flowing through deep stacks.
    """
    residual = conv1d_causal(relu(conv1d_causal(x, p.conv1)), p.conv2)
    shortcut = x if p.projection is None else conv1d_causal(x, p.projection)
    return relu(add(shortcut, residual))


def tcn_stack(x, blocks: list[TcnBlockParams]) -> Tensor:
    """Sequential residual blocks, usually with dilations 1, 2, 4, ..."""
    if not blocks:
        raise ShapeError("tcn_stack needs at least one block")
    h = as_tensor(x)
    for b in blocks:
        h = tcn_block(h, b)
    return h


def receptive_field(blocks: list[TcnBlockParams]) -> int:
    """1 + sum over blocks of 2*(K-1)*d (two convs per block)."""
    return 1 + sum(2 * (b.kernel_size - 1) * b.dilation for b in blocks)


def bitcn(x, fwd: list[TcnBlockParams], bwd: list[TcnBlockParams]) -> Tensor:
    """Bidirectional TCN: the forward stack reads the signal as-is; the
    backward stack reads it time-reversed and its output is reversed back.
    Outputs concatenate as [forward | backward] along channels."""
    x = as_tensor(x)
    y_f = tcn_stack(x, fwd)
    y_b = reverse_time(tcn_stack(reverse_time(x), bwd))
    return concat_channels([y_f, y_b], batched=x.ndim == 3)


# ---------------------------------------------------------------------------
# depthwise-separable stack
# ---------------------------------------------------------------------------


@dataclass
class SeparableParams:
    """Depthwise kernels [C, K] (causal, dilated) followed by a biased 1x1
    pointwise mix to `out_channels`, then ReLU."""

    depthwise: Tensor
    pointwise: Conv1dKernel
    dilation: int = 1

    def __post_init__(self):
        if self.pointwise.kernel_size != 1:
            raise ShapeError("pointwise stage must have kernel size 1")
        if self.pointwise.in_channels != self.depthwise.shape[0]:
            raise ShapeError("pointwise input channels must match depthwise channels")


def separable_stack(x, p: SeparableParams) -> Tensor:
    """ReLU(pointwise(depthwise(x))): spatial filtering per channel, then
    channel-wise summation into the output feature maps."""
    h = depthwise_conv1d(x, p.depthwise, p.dilation)
    return relu(conv1d_causal(h, p.pointwise))


def separable_param_count(channels: int, out_channels: int, kernel: int) -> int:
    """Weights in a separable layer (C*K depthwise + C_out*C pointwise)."""
    return channels * kernel + out_channels * channels


def full_conv_param_count(channels: int, out_channels: int, kernel: int) -> int:
    return out_channels * channels * kernel


# ---------------------------------------------------------------------------
# squeeze-and-excitation
# ---------------------------------------------------------------------------


@dataclass
class SeBlockParams:
    """Bottleneck pair y1 [C, C/r], y2 [C/r, C] and the output gate.

    The gate defaults to sigmoid (bounded recalibration); "relu" swaps in an
    unbounded rectified gate.
    """

    y1: Tensor
    y2: Tensor
    ratio: int
    gate: str = "sigmoid"

    def __post_init__(self):
        C = self.y1.shape[0]
        if C % self.ratio != 0:
            raise ShapeError(f"SE ratio {self.ratio} must divide {C} channels")
        hidden = C // self.ratio
        if self.y1.shape != (C, hidden) or self.y2.shape != (hidden, C):
            raise ShapeError(f"SE weight shapes {self.y1.shape}/{self.y2.shape} "
                             f"inconsistent with C={C}, r={self.ratio}")
        if self.gate not in ("sigmoid", "relu"):
            raise ShapeError(f"unknown SE gate {self.gate!r}")

    @property
    def channels(self) -> int:
        return self.y1.shape[0]


def _excite(z: Tensor, y1: Tensor, y2: Tensor, gate: str) -> Tensor:
    """gate(relu(z @ y1) @ y2) on row vectors [B, C]."""
    h = matmul(relu(matmul(z, y1)), y2)
    return sigmoid(h) if gate == "sigmoid" else relu(h)


def se_block(x, p: SeBlockParams) -> Tensor:
    """Squeeze (global average pool per channel), excite (two-layer
    bottleneck), rescale: out[c, t] = s_c * x[c, t]."""
    x = as_tensor(x)
    if x.ndim not in (2, 3):
        raise ShapeError(f"se_block expects [C, T] or [B, C, T], got {x.shape}")
    if x.shape[-2] != p.channels:
        raise ShapeError(f"se_block: input has {x.shape[-2]} channels, "
                         f"params expect {p.channels}")
    z = avg_pool_time(x)                       # [C] or [B, C]
    z2 = z if z.ndim == 2 else _row(z)
    s = _excite(z2, p.y1, p.y2, p.gate)
    if z.ndim == 1:
        s = _unrow(s)
    return scale_channels(x, s)


def _row(v: Tensor) -> Tensor:
    """[C] -> [1, C] view node (matmul wants matrices)."""
    out = _result(v.data[None, :], "row", (v,))
    if out.requires_grad:
        out._backward = lambda g: v.accumulate_grad(g[0])
    return out


def _unrow(m: Tensor) -> Tensor:
    out = _result(m.data[0], "unrow", (m,))
    if out.requires_grad:
        out._backward = lambda g: m.accumulate_grad(g[None, :])
    return out


# ---------------------------------------------------------------------------
# LSTM / BiLSTM
# ---------------------------------------------------------------------------


@dataclass
class LstmParams:
    """Fused gate parameters, rows ordered [input, forget, candidate, output]:
    wx [4H, In], wh [4H, H], bias [4H].  Initial h and c are zeros."""

    wx: Tensor
    wh: Tensor
    bias: Tensor

    def __post_init__(self):
        if self.wx.ndim != 2 or self.wx.shape[0] % 4 != 0:
            raise ShapeError(f"wx must be [4H, In], got {self.wx.shape}")
        H = self.hidden_size
        if self.wh.shape != (4 * H, H):
            raise ShapeError(f"wh shape {self.wh.shape} inconsistent with H={H}")
        if self.bias.shape != (4 * H,):
            raise ShapeError(f"bias shape {self.bias.shape} inconsistent with H={H}")

    @property
    def hidden_size(self) -> int:
        return self.wx.shape[0] // 4

    @property
    def input_size(self) -> int:
        return self.wx.shape[1]


def lstm_cell(x_t: np.ndarray, h_prev: np.ndarray, c_prev: np.ndarray,
              p: LstmParams) -> tuple[np.ndarray, np.ndarray]:
    """One plain-numpy step with the standard four gates:

        i, f, o = sigmoid(affine);  g = tanh(affine)
        c_t = f * c_prev + i * g;   h_t = o * tanh(c_t)

    Serves as the reference cell for tests and for the fused scan below.
    """
    H = p.hidden_size
    z = x_t @ p.wx.data.T + h_prev @ p.wh.data.T + p.bias.data
    i = _sigmoid(z[..., 0:H])
    f = _sigmoid(z[..., H:2 * H])
    g = np.tanh(z[..., 2 * H:3 * H])
    o = _sigmoid(z[..., 3 * H:4 * H])
    c_t = f * c_prev + i * g
    h_t = o * np.tanh(c_t)
    return h_t, c_t


def lstm_scan(xseq, p: LstmParams) -> Tensor:
    """Forward LSTM over [.., In, T] -> [.., H, T], as one fused tape node.

    The backward closure is hand-written backpropagation through time;
    its correctness is pinned by the finite-difference gradcheck.
    """
    xseq = as_tensor(xseq)
    if xseq.ndim == 2:
        x3, batched = xseq.data[None], False
    elif xseq.ndim == 3:
        x3, batched = xseq.data, True
    else:
        raise ShapeError(f"lstm_scan expects [In, T] or [B, In, T], got {xseq.shape}")
    if x3.shape[1] != p.input_size:
        raise ShapeError(f"lstm_scan: input size {x3.shape[1]} != {p.input_size}")
    B, _, T = x3.shape
    H = p.hidden_size
    wx, wh, b = p.wx.data, p.wh.data, p.bias.data

    hs = np.zeros((B, H, T))
    gates_i = np.empty((T, B, H)); gates_f = np.empty((T, B, H))
    gates_g = np.empty((T, B, H)); gates_o = np.empty((T, B, H))
    cells = np.empty((T, B, H))
    h = np.zeros((B, H))
    c = np.zeros((B, H))
    for t in range(T):
        z = x3[:, :, t] @ wx.T + h @ wh.T + b
        i = _sigmoid(z[:, 0:H])
        f = _sigmoid(z[:, H:2 * H])
        g = np.tanh(z[:, 2 * H:3 * H])
        o = _sigmoid(z[:, 3 * H:4 * H])
        c = f * c + i * g
        h = o * np.tanh(c)
        gates_i[t], gates_f[t], gates_g[t], gates_o[t], cells[t] = i, f, g, o, c
        hs[:, :, t] = h

    out = _result(hs if batched else hs[0], "lstm_scan", (xseq, p.wx, p.wh, p.bias))
    if out.requires_grad:
        def bw(grad):
            g3 = grad if batched else grad[None]
            dwx = np.zeros_like(wx)
            dwh = np.zeros_like(wh)
            db = np.zeros_like(b)
            dx = np.zeros_like(x3)
            dh_next = np.zeros((B, H))
            dc_next = np.zeros((B, H))
            for t in range(T - 1, -1, -1):
                i, f, gg, o, c_t = (gates_i[t], gates_f[t], gates_g[t],
                                    gates_o[t], cells[t])
                c_prev = cells[t - 1] if t > 0 else np.zeros((B, H))
                h_prev = hs[:, :, t - 1] if t > 0 else np.zeros((B, H))
                tc = np.tanh(c_t)
                dh = g3[:, :, t] + dh_next
                do = dh * tc
                dc = dc_next + dh * o * (1.0 - tc * tc)
                di = dc * gg
                df = dc * c_prev
                dg = dc * i
                dc_next = dc * f
                dz = np.concatenate([di * i * (1.0 - i),
                                     df * f * (1.0 - f),
                                     dg * (1.0 - gg * gg),
                                     do * o * (1.0 - o)], axis=1)
                dwx += dz.T @ x3[:, :, t]
                dwh += dz.T @ h_prev
                db += dz.sum(axis=0)
                dx[:, :, t] = dz @ wx
                dh_next = dz @ wh
            if p.wx.requires_grad:
                p.wx.accumulate_grad(dwx)
            if p.wh.requires_grad:
                p.wh.accumulate_grad(dwh)
            if p.bias.requires_grad:
                p.bias.accumulate_grad(db)
            if xseq.requires_grad:
                xseq.accumulate_grad(dx if batched else dx[0])
        out._backward = bw
    return out


def bilstm(seq, fwd: LstmParams, bwd: LstmParams, combine: str = "sum") -> Tensor:
    """Forward scan plus reversed backward scan, combined per timestep.

    combine="sum" adds the two hidden sequences (equal H required);
    combine="concat" stacks them to 2H channels.
    """
    seq = as_tensor(seq)
    h_f = lstm_scan(seq, fwd)
    h_b = reverse_time(lstm_scan(reverse_time(seq), bwd))
    if combine == "sum":
        if fwd.hidden_size != bwd.hidden_size:
            raise ShapeError("bilstm sum combine requires equal hidden sizes, got "
                             f"{fwd.hidden_size} and {bwd.hidden_size}")
        return add(h_f, h_b)
    if combine == "concat":
        return concat_channels([h_f, h_b], batched=seq.ndim == 3)
    raise ShapeError(f"unknown bilstm combine {combine!r}")


# ---------------------------------------------------------------------------
# dense / dropout / channel attention
# ---------------------------------------------------------------------------


def dense(x, w: Tensor, b: Tensor) -> Tensor:
    """Affine map W x + b for a feature vector [C_in] or rows [B, C_in]."""
    x = as_tensor(x)
    if w.ndim != 2 or b.shape != (w.shape[0],):
        raise ShapeError(f"dense: bad parameter shapes W={w.shape}, b={b.shape}")
    if x.ndim not in (1, 2) or x.shape[-1] != w.shape[1]:
        raise ShapeError(f"dense: input {x.shape} incompatible with W={w.shape}")
    y = x.data @ w.data.T + b.data
    out = _result(y, "dense", (x, w, b))
    if out.requires_grad:
        xd, wd = x.data, w.data
        def bw(g):
            g2 = g if g.ndim == 2 else g[None]
            x2 = xd if xd.ndim == 2 else xd[None]
            if w.requires_grad:
                w.accumulate_grad(g2.T @ x2)
            if b.requires_grad:
                b.accumulate_grad(g2.sum(axis=0))
            if x.requires_grad:
                x.accumulate_grad(g @ wd)
        out._backward = bw
    return out


def dropout(x, rate: float, mode: str, rng: RngState | None = None) -> Tensor:
    """Inverted dropout: in train mode each element is zeroed with
    probability `rate` and survivors scale by 1/(1-rate); eval mode is the
    bitwise identity."""
    x = as_tensor(x)
    if not 0.0 <= rate < 1.0:
        raise ShapeError(f"dropout rate must be in [0, 1), got {rate}")
    if mode not in ("train", "eval"):
        raise ShapeError(f"dropout mode must be train or eval, got {mode!r}")
    if mode == "eval" or rate == 0.0:
        out = _result(x.data, "dropout", (x,))
        if out.requires_grad:
            out._backward = lambda g: x.accumulate_grad(g)
        return out
    if rng is None:
        raise ShapeError("train-mode dropout requires an rng")
    keep = rng.uniform(x.shape) >= rate
    scale = keep / (1.0 - rate)
    out = _result(x.data * scale, "dropout", (x,))
    if out.requires_grad:
        out._backward = lambda g: x.accumulate_grad(g * scale)
    return out


@dataclass
class ChannelAttentionParams:
    """SE-style gate over the fused feature vector; the gate is sigmoid."""

    y1: Tensor
    y2: Tensor
    ratio: int

    def __post_init__(self):
        C = self.y1.shape[0]
        if C % self.ratio != 0:
            raise ShapeError(f"attention ratio {self.ratio} must divide {C} features")
        hidden = C // self.ratio
        if self.y1.shape != (C, hidden) or self.y2.shape != (hidden, C):
            raise ShapeError(f"attention weight shapes {self.y1.shape}/{self.y2.shape}"
                             f" inconsistent with C={C}, r={self.ratio}")

    @property
    def channels(self) -> int:
        return self.y1.shape[0]


def channel_attention(f, p: ChannelAttentionParams) -> Tensor:
    """f * sigmoid(relu(f @ y1) @ y2) on [C_fused] or [B, C_fused]."""
    f = as_tensor(f)
    if f.ndim not in (1, 2) or f.shape[-1] != p.channels:
        raise ShapeError(f"channel_attention: input {f.shape} incompatible with "
                         f"{p.channels} features")
    f2 = f if f.ndim == 2 else _row(f)
    s = _excite(f2, p.y1, p.y2, "sigmoid")
    if f.ndim == 1:
        s = _unrow(s)
    return mul(f, s)
