"""Neural building blocks: embeddings, GRU cell, location attention, dense
layers, and the page-shaped convolution/deconvolution stacks.

All layers accept either a single vector/grid or a batch with a leading
batch axis, and return outputs of matching rank.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .autodiff import (
    ParameterSet,
    ShapeError,
    Tensor,
    add,
    concat,
    conv2d,
    deconv2d,
    make_op,
    matmul,
    mul,
    reshape,
    sigmoid,
    slice_,
    softmax,
    tanh,
    xavier_uniform,
)

__all__ = [
    "Dense",
    "EmbeddingLayer",
    "GruParams",
    "gru_cell",
    "gru_input_projections",
    "gru_cell_projected",
    "gru_sequence",
    "pack_rows",
    "gather_last",
    "AttentionParams",
    "attention_pool",
    "attention_weights",
    "attention_over_sequence",
    "PageConv",
    "PageDeconv",
    "DensePageDecoder",
]


def _as_rows(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 1:
        return reshape(x, (1, x.shape[0])), True
    if x.ndim == 2:
        return x, False
    raise ShapeError(f"expected a vector or a batch of vectors, got shape {x.shape}")


def _maybe_squeeze(x: Tensor, squeeze: bool) -> Tensor:
    return reshape(x, (x.shape[1],)) if squeeze else x


class Dense:
    """Affine layer y = x W + b with an optional tanh activation."""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, activation: str | None = None):
        if activation not in (None, "tanh"):
            raise ValueError(f"unsupported activation {activation!r}")
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.activation = activation
        self.weight = Tensor(xavier_uniform(rng, (in_dim, out_dim)), requires_grad=True)
        self.bias = Tensor(np.zeros(out_dim), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        x, squeeze = _as_rows(x)
        if x.shape[1] != self.in_dim:
            raise ShapeError(f"dense layer expects input dim {self.in_dim}, got {x.shape[1]}")
        out = add(matmul(x, self.weight), self.bias)
        if self.activation == "tanh":
            out = tanh(out)
        return _maybe_squeeze(out, squeeze)

    def params(self, prefix: str) -> list[tuple[str, Tensor]]:
        return [(f"{prefix}/W", self.weight), (f"{prefix}/b", self.bias)]


class EmbeddingLayer(Dense):
    """Shared modality embedding: tanh(W x + b), one instance per modality."""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator):
        super().__init__(in_dim, out_dim, rng, activation="tanh")

    def embed(self, x: Tensor) -> Tensor:
        return self(x)


class GruParams:
    """Gated recurrent unit weights: update gate, reset gate, candidate."""

    def __init__(self, input_dim: int, hidden_dim: int, rng: np.random.Generator):
        self.input_dim = input_dim
        self.hidden_dim = hidden_dim
        make_w = lambda: Tensor(xavier_uniform(rng, (input_dim, hidden_dim)), requires_grad=True)
        make_u = lambda: Tensor(xavier_uniform(rng, (hidden_dim, hidden_dim)), requires_grad=True)
        self.w_update, self.u_update = make_w(), make_u()
        self.w_reset, self.u_reset = make_w(), make_u()
        self.w_candidate, self.u_candidate = make_w(), make_u()

    def params(self, prefix: str) -> list[tuple[str, Tensor]]:
        return [
            (f"{prefix}/W_z", self.w_update),
            (f"{prefix}/U_z", self.u_update),
            (f"{prefix}/W_r", self.w_reset),
            (f"{prefix}/U_r", self.u_reset),
            (f"{prefix}/W", self.w_candidate),
            (f"{prefix}/U", self.u_candidate),
        ]


def gru_input_projections(p: GruParams, x: Tensor) -> tuple[Tensor, Tensor, Tensor]:
    """Input-side projections for all rows of x at once.

    Hoisting these out of the recurrence lets a whole sequence share three
    large matmuls instead of three small ones per step.
    """
    if x.shape[-1] != p.input_dim:
        raise ShapeError(f"gru projections: input dim {x.shape[-1]} != expected {p.input_dim}")
    return (
        matmul(x, p.w_update),
        matmul(x, p.w_reset),
        matmul(x, p.w_candidate),
    )


def gru_cell_projected(p: GruParams, xz: Tensor, xr: Tensor, xc: Tensor, h_prev: Tensor) -> Tensor:
    """GRU step from precomputed input projections."""
    z = sigmoid(add(xz, matmul(h_prev, p.u_update)))
    r = sigmoid(add(xr, matmul(h_prev, p.u_reset)))
    candidate = tanh(add(xc, matmul(mul(r, h_prev), p.u_candidate)))
    return add(mul(Tensor(1.0) - z, h_prev), mul(z, candidate))


def gru_cell(p: GruParams, x: Tensor, h_prev: Tensor) -> Tensor:
    """One GRU step: h = (1 - z) * h_prev + z * candidate.

    z and r gate the update and the reuse of the previous hidden state; the
    candidate mixes the input with the reset-gated previous state.
    """
    x, squeeze = _as_rows(x)
    h_prev, _ = _as_rows(h_prev)
    if x.shape[1] != p.input_dim or h_prev.shape[1] != p.hidden_dim:
        raise ShapeError(
            f"gru_cell: got input dim {x.shape[1]} and hidden dim {h_prev.shape[1]}, "
            f"expected {p.input_dim} and {p.hidden_dim}"
        )
    xz, xr, xc = gru_input_projections(p, x)
    h = gru_cell_projected(p, xz, xr, xc, h_prev)
    return _maybe_squeeze(h, squeeze)


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-x))


def _active_counts(lengths: np.ndarray, steps: int) -> np.ndarray:
    """Rows still running at each step, for descending-sorted lengths."""
    if np.any(np.diff(lengths) > 0):
        raise ShapeError("gru_sequence: lengths must be sorted in descending order")
    return np.array([int((lengths > t).sum()) for t in range(steps)])


def gru_sequence(p: GruParams, x: Tensor, h0: Tensor, lengths: Sequence[int] | None = None) -> Tensor:
    """All hidden states of a GRU run over (batch, steps, input).

    One fused graph node: the forward loop runs in plain numpy and the
    backward pass replays the recurrence in reverse (truncation-free BPTT).
    Step t of the output matches ``gru_cell`` applied t times.

    With ``lengths`` (per-row step counts, sorted descending), rows stop
    updating once exhausted and padded positions stay zero; this lets one
    call cover a batch of unequal-length sessions.
    """
    if x.ndim != 3:
        raise ShapeError(f"gru_sequence: expected (batch, steps, input), got {x.shape}")
    batch, steps, in_dim = x.shape
    if in_dim != p.input_dim or h0.shape != (batch, p.hidden_dim):
        raise ShapeError(
            f"gru_sequence: input {x.shape} and initial state {h0.shape} do not fit "
            f"dims ({p.input_dim}, {p.hidden_dim})"
        )
    if lengths is None:
        counts = np.full(steps, batch)
    else:
        lengths = np.asarray(lengths, dtype=np.int64)
        if lengths.shape != (batch,) or lengths.max(initial=0) > steps:
            raise ShapeError(f"gru_sequence: bad lengths {lengths} for input {x.shape}")
        counts = _active_counts(lengths, steps)
    wz, uz = p.w_update.data, p.u_update.data
    wr, ur = p.w_reset.data, p.u_reset.data
    wc, uc = p.w_candidate.data, p.u_candidate.data
    xd, h = x.data, h0.data
    zs = np.zeros((batch, steps, p.hidden_dim))
    rs = np.zeros_like(zs)
    cs = np.zeros_like(zs)
    hs = np.zeros_like(zs)
    for t in range(steps):
        m = counts[t]
        if m == 0:
            break
        xt = xd[:m, t, :]
        ht = h[:m]
        z = _sigmoid_np(xt @ wz + ht @ uz)
        r = _sigmoid_np(xt @ wr + ht @ ur)
        c = np.tanh(xt @ wc + (r * ht) @ uc)
        hn = (1.0 - z) * ht + z * c
        if m == batch:
            h = hn
        else:
            h = h.copy()
            h[:m] = hn
        zs[:m, t], rs[:m, t], cs[:m, t], hs[:m, t] = z, r, c, hn

    def fn(g, xd=xd, h0d=h0.data, zs=zs, rs=rs, cs=cs, hs=hs, counts=counts):
        gx = np.zeros_like(xd)
        gh = np.zeros_like(h0d)
        gwz, guz = np.zeros_like(wz), np.zeros_like(uz)
        gwr, gur = np.zeros_like(wr), np.zeros_like(ur)
        gwc, guc = np.zeros_like(wc), np.zeros_like(uc)
        for t in range(steps - 1, -1, -1):
            m = counts[t]
            if m == 0:
                continue
            h_prev = hs[:m, t - 1] if t > 0 else h0d[:m]
            z, r, c = zs[:m, t], rs[:m, t], cs[:m, t]
            xt = xd[:m, t, :]
            gh_t = g[:m, t, :] + gh[:m]
            gz = gh_t * (c - h_prev)
            gc = gh_t * z
            ghp = gh_t * (1.0 - z)
            gpc = gc * (1.0 - c * c)
            gwc += xt.T @ gpc
            grh = gpc @ uc.T
            guc += (r * h_prev).T @ gpc
            gr = grh * h_prev
            ghp += grh * r
            gpr = gr * r * (1.0 - r)
            gwr += xt.T @ gpr
            gur += h_prev.T @ gpr
            ghp += gpr @ ur.T
            gpz = gz * z * (1.0 - z)
            gwz += xt.T @ gpz
            guz += h_prev.T @ gpz
            ghp += gpz @ uz.T
            gx[:m, t, :] = gpz @ wz.T + gpr @ wr.T + gpc @ wc.T
            gh[:m] = ghp
        return gx, gh, gwz, guz, gwr, gur, gwc, guc

    inputs = (x, h0, p.w_update, p.u_update, p.w_reset, p.u_reset, p.w_candidate, p.u_candidate)
    return make_op(hs, inputs, fn)


def pack_rows(vecs: Tensor, lengths: Sequence[int]) -> Tensor:
    """Pack stacked per-step rows into a zero-padded (batch, maxT, dim) tensor.

    Row blocks follow the sample order of ``lengths``; padded positions are
    zero and receive no gradient.
    """
    lengths = np.asarray(lengths, dtype=np.int64)
    total = int(lengths.sum())
    if vecs.ndim != 2 or vecs.shape[0] != total:
        raise ShapeError(f"pack_rows: expected ({total}, dim) rows for lengths {lengths.tolist()}")
    batch = len(lengths)
    max_len = int(lengths.max(initial=0))
    dim = vecs.shape[1]
    offsets = np.concatenate([[0], np.cumsum(lengths)])
    out = np.zeros((batch, max_len, dim))
    for i in range(batch):
        n = lengths[i]
        if n:
            out[i, :n] = vecs.data[offsets[i] : offsets[i + 1]]

    def fn(g, offsets=offsets, lengths=lengths):
        gv = np.empty((total, dim))
        for i in range(batch):
            n = lengths[i]
            if n:
                gv[offsets[i] : offsets[i + 1]] = g[i, :n]
        return (gv,)

    return make_op(out, (vecs,), fn)


def gather_last(hs: Tensor, lengths: Sequence[int]) -> Tensor:
    """Per-row hidden state at each row's final valid step."""
    lengths = np.asarray(lengths, dtype=np.int64)
    if hs.ndim != 3 or lengths.min(initial=1) < 1 or lengths.max(initial=0) > hs.shape[1]:
        raise ShapeError(f"gather_last: lengths {lengths.tolist()} invalid for {hs.shape}")
    idx = lengths - 1
    rows = np.arange(hs.shape[0])
    out = hs.data[rows, idx]

    def fn(g, shape=hs.shape, rows=rows, idx=idx):
        gh = np.zeros(shape)
        gh[rows, idx] = g
        return (gh,)

    return make_op(out, (hs,), fn)


class AttentionParams:
    """Location-based attention: a scalar score per hidden state."""

    def __init__(self, hidden_dim: int, rng: np.random.Generator):
        self.hidden_dim = hidden_dim
        self.weight = Tensor(xavier_uniform(rng, (hidden_dim, 1)), requires_grad=True)
        self.bias = Tensor(np.zeros(1), requires_grad=True)

    def params(self, prefix: str) -> list[tuple[str, Tensor]]:
        return [(f"{prefix}/W_alpha", self.weight), (f"{prefix}/b_alpha", self.bias)]


def _attention_forward(p: AttentionParams, stacked: np.ndarray, valid: np.ndarray | None = None):
    """Weights and pooled output for stacked hiddens (batch, T, hidden).

    ``valid`` marks real (non-padding) steps; padded steps get zero weight.
    """
    scores = stacked @ p.weight.data.ravel() + p.bias.data[0]
    if valid is not None:
        scores = np.where(valid, scores, -np.inf)
    shifted = scores - scores.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    alpha = e / e.sum(axis=1, keepdims=True)
    pooled = (alpha[:, :, None] * stacked).sum(axis=1)
    return alpha, pooled


def _attention_backward(p: AttentionParams, stacked: np.ndarray, alpha: np.ndarray, g: np.ndarray):
    """Gradients w.r.t. the stacked hiddens and the score parameters."""
    g_stacked = alpha[:, :, None] * g[:, None, :]
    g_alpha = (stacked * g[:, None, :]).sum(axis=2)
    g_scores = alpha * (g_alpha - (g_alpha * alpha).sum(axis=1, keepdims=True))
    g_stacked += g_scores[:, :, None] * p.weight.data.ravel()[None, None, :]
    g_weight = (stacked * g_scores[:, :, None]).sum(axis=(0, 1)).reshape(-1, 1)
    g_bias = np.array([g_scores.sum()])
    return g_stacked, g_weight, g_bias


def _check_hidden_dim(p: AttentionParams, dim: int) -> None:
    if dim != p.hidden_dim:
        raise ShapeError(f"attention: hidden dim {dim} != configured {p.hidden_dim}")


def attention_weights(p: AttentionParams, hiddens: Sequence[Tensor]) -> Tensor:
    """Normalized attention weights over the sequence, shape (batch, T)."""
    if len(hiddens) == 0:
        raise ShapeError("attention_pool: empty hidden-state sequence")
    rows = [_as_rows(h)[0] for h in hiddens]
    _check_hidden_dim(p, rows[0].shape[1])
    stacked = np.stack([h.data for h in rows], axis=1)
    alpha, _ = _attention_forward(p, stacked)
    return Tensor(alpha)


def attention_pool(p: AttentionParams, hiddens: Sequence[Tensor]) -> Tensor:
    """Softmax-weighted combination of hidden states.

    Fused into one graph node; gradients reach every hidden state and the
    score parameters.
    """
    if len(hiddens) == 0:
        raise ShapeError("attention_pool: empty hidden-state sequence")
    squeeze = hiddens[0].ndim == 1
    rows = []
    for h in hiddens:
        h, sq = _as_rows(h)
        if sq != squeeze:
            raise ShapeError("attention_pool: mixed vector and batch hidden states")
        rows.append(h)
    _check_hidden_dim(p, rows[0].shape[1])
    stacked = np.stack([h.data for h in rows], axis=1)
    alpha, pooled = _attention_forward(p, stacked)

    def fn(g, stacked=stacked, alpha=alpha):
        g_stacked, g_weight, g_bias = _attention_backward(p, stacked, alpha, g)
        per_hidden = [g_stacked[:, t, :] for t in range(len(rows))]
        return (*per_hidden, g_weight, g_bias)

    out = make_op(pooled, (*rows, p.weight, p.bias), fn)
    return _maybe_squeeze(out, squeeze)


def attention_over_sequence(p: AttentionParams, hs: Tensor, lengths: Sequence[int] | None = None) -> Tensor:
    """attention_pool over a (batch, T, hidden) tensor of hidden states.

    ``lengths`` restricts each row's attention to its first valid steps;
    padded steps get exactly zero weight and zero gradient.
    """
    if hs.ndim != 3:
        raise ShapeError(f"attention_over_sequence: expected (batch, T, hidden), got {hs.shape}")
    _check_hidden_dim(p, hs.shape[2])
    valid = None
    if lengths is not None:
        lengths = np.asarray(lengths, dtype=np.int64)
        if lengths.shape != (hs.shape[0],) or lengths.min(initial=1) < 1:
            raise ShapeError(f"attention_over_sequence: bad lengths {lengths.tolist()}")
        valid = np.arange(hs.shape[1])[None, :] < lengths[:, None]
    alpha, pooled = _attention_forward(p, hs.data, valid)

    def fn(g, stacked=hs.data, alpha=alpha):
        return _attention_backward(p, stacked, alpha, g)

    return make_op(pooled, (hs, p.weight, p.bias), fn)


def _grid_rank(x: Tensor, name: str) -> bool:
    if x.ndim == 3:
        return True
    if x.ndim == 4:
        return False
    raise ShapeError(f"{name}: expected (h, w, c) or (batch, h, w, c), got {x.shape}")


class PageConv:
    """Two small convolutions over the page grid, then a dense projection.

    Kernels 2x2 then 2x1 at stride 1 see both grid axes; channel widths
    narrow toward the fixed-length page summary vector.
    """

    def __init__(
        self,
        rows: int,
        cols: int,
        in_channels: int,
        rng: np.random.Generator,
        mid_channels: tuple[int, int] = (32, 16),
        out_dim: int = 64,
    ):
        if rows < 3 or cols < 2:
            raise ShapeError(f"page grid {rows}x{cols} too small for the 2x2 + 2x1 stack")
        c1, c2 = mid_channels
        self.rows, self.cols = rows, cols
        self.in_channels = in_channels
        self.out_dim = out_dim
        self.kernel1 = Tensor(xavier_uniform(rng, (2, 2, in_channels, c1)), requires_grad=True)
        self.bias1 = Tensor(np.zeros(c1), requires_grad=True)
        self.kernel2 = Tensor(xavier_uniform(rng, (2, 1, c1, c2)), requires_grad=True)
        self.bias2 = Tensor(np.zeros(c2), requires_grad=True)
        self.flat_dim = (rows - 2) * (cols - 1) * c2
        self.dense = Dense(self.flat_dim, out_dim, rng, activation="tanh")

    def __call__(self, page: Tensor) -> Tensor:
        single = _grid_rank(page, "page_conv")
        expect = (self.rows, self.cols, self.in_channels)
        got = page.shape if single else page.shape[1:]
        if got != expect:
            raise ShapeError(f"page_conv: grid shape {got} != configured {expect}")
        h1 = tanh(conv2d(page, self.kernel1, self.bias1))
        h2 = tanh(conv2d(h1, self.kernel2, self.bias2))
        flat = reshape(h2, (self.flat_dim,) if single else (h2.shape[0], self.flat_dim))
        return self.dense(flat)

    def params(self, prefix: str) -> list[tuple[str, Tensor]]:
        return [
            (f"{prefix}/conv1/K", self.kernel1),
            (f"{prefix}/conv1/b", self.bias1),
            (f"{prefix}/conv2/K", self.kernel2),
            (f"{prefix}/conv2/b", self.bias2),
        ] + self.dense.params(f"{prefix}/dense")


class PageDeconv:
    """Mirror of PageConv: dense expansion then two transposed convolutions.

    Restores a page-shaped grid from a state vector; the final tanh keeps
    proto embeddings inside the (-1, 1) range of real item embeddings.
    """

    def __init__(
        self,
        rows: int,
        cols: int,
        out_channels: int,
        in_dim: int,
        rng: np.random.Generator,
        mid_channels: tuple[int, int] = (32, 16),
    ):
        if rows < 3 or cols < 2:
            raise ShapeError(f"page grid {rows}x{cols} too small for the mirrored stack")
        c1, c2 = mid_channels
        self.rows, self.cols = rows, cols
        self.out_channels = out_channels
        self.in_dim = in_dim
        self.seed_rows, self.seed_cols, self.seed_channels = rows - 2, cols - 1, c2
        self.flat_dim = self.seed_rows * self.seed_cols * c2
        self.dense = Dense(in_dim, self.flat_dim, rng, activation="tanh")
        self.kernel1 = Tensor(xavier_uniform(rng, (2, 1, c2, c1)), requires_grad=True)
        self.bias1 = Tensor(np.zeros(c1), requires_grad=True)
        self.kernel2 = Tensor(xavier_uniform(rng, (2, 2, c1, out_channels)), requires_grad=True)
        self.bias2 = Tensor(np.zeros(out_channels), requires_grad=True)

    def __call__(self, state: Tensor) -> Tensor:
        state, squeeze = _as_rows(state)
        if state.shape[1] != self.in_dim:
            raise ShapeError(f"page_deconv: state dim {state.shape[1]} != configured {self.in_dim}")
        batch = state.shape[0]
        flat = self.dense(state)
        grid = reshape(flat, (batch, self.seed_rows, self.seed_cols, self.seed_channels))
        up1 = tanh(deconv2d(grid, self.kernel1, self.bias1))
        page = tanh(deconv2d(up1, self.kernel2, self.bias2))
        if squeeze:
            return reshape(page, page.shape[1:])
        return page

    def params(self, prefix: str) -> list[tuple[str, Tensor]]:
        return self.dense.params(f"{prefix}/dense") + [
            (f"{prefix}/deconv1/K", self.kernel1),
            (f"{prefix}/deconv1/b", self.bias1),
            (f"{prefix}/deconv2/K", self.kernel2),
            (f"{prefix}/deconv2/b", self.bias2),
        ]


class DensePageDecoder:
    """Fully-connected decoder variant: state to a flat page, reshaped."""

    def __init__(
        self,
        rows: int,
        cols: int,
        out_channels: int,
        in_dim: int,
        rng: np.random.Generator,
        hidden_dim: int = 128,
    ):
        self.rows, self.cols = rows, cols
        self.out_channels = out_channels
        self.in_dim = in_dim
        self.hidden = Dense(in_dim, hidden_dim, rng, activation="tanh")
        self.output = Dense(hidden_dim, rows * cols * out_channels, rng, activation="tanh")

    def __call__(self, state: Tensor) -> Tensor:
        state, squeeze = _as_rows(state)
        if state.shape[1] != self.in_dim:
            raise ShapeError(f"dense decoder: state dim {state.shape[1]} != configured {self.in_dim}")
        flat = self.output(self.hidden(state))
        shape = (self.rows, self.cols, self.out_channels)
        if squeeze:
            return reshape(flat, shape)
        return reshape(flat, (state.shape[0],) + shape)

    def params(self, prefix: str) -> list[tuple[str, Tensor]]:
        return self.hidden.params(f"{prefix}/hidden") + self.output.params(f"{prefix}/out")


def collect_params(pairs: Sequence[tuple[str, Tensor]]) -> ParameterSet:
    return ParameterSet(pairs)
