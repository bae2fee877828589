"""Recurrent convolutional pose regressor.

Three inception blocks turn a stacked RGB-D frame pair into a feature
vector; two stacked LSTM layers carry motion context across time; an affine
layer maps the top LSTM output to 7 raw pose values (translation, then an
unnormalised quaternion).

Sequences are handled as ``[T, B, ...]`` arrays: the convolutional stack runs
on all ``T * B`` pairs at once, the LSTMs step over ``T``.
"""
from dataclasses import asdict, dataclass, field

import numpy as np

from endovo import layers
from endovo.errors import ConfigurationError, DimensionError, NumericError, StateError
from endovo.geometry import RelativePose, canonicalize, quat_normalize

GATES = ("f", "i", "g", "o")
BRANCHES = ("b1", "b3r", "b3", "b5r", "b5", "bp")
DTYPES = {"float64": np.float64, "float32": np.float32}


@dataclass
class NetConfig:
    height: int = 64
    width: int = 64
    in_channels: int = 8
    inception_widths: tuple = ((8, 8, 8, 8), (16, 16, 16, 16), (32, 32, 32, 32))
    lstm_hidden: int = 64
    dropout_rate: float = 0.0
    precision: str = "float32"

    def __post_init__(self):
        self.inception_widths = tuple(tuple(int(w) for w in ws) for ws in self.inception_widths)
        if len(self.inception_widths) != 3 or any(len(ws) != 4 for ws in self.inception_widths):
            raise ConfigurationError("need three inception blocks with four branch widths each")
        if any(w < 1 for ws in self.inception_widths for w in ws):
            raise ConfigurationError("inception widths must be positive")
        if self.height % 8 or self.width % 8 or self.height < 8 or self.width < 8:
            raise ConfigurationError("input height and width must be positive multiples of 8")
        if self.lstm_hidden < 1 or self.in_channels < 1:
            raise ConfigurationError("lstm_hidden and in_channels must be positive")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigurationError("dropout_rate must be in [0, 1)")
        if self.precision not in DTYPES:
            raise ConfigurationError(f"precision must be one of {sorted(DTYPES)}")

    @property
    def dtype(self):
        return DTYPES[self.precision]

    @property
    def feature_size(self):
        return sum(self.inception_widths[-1]) * (self.height // 8) * (self.width // 8)

    def to_dict(self):
        d = asdict(self)
        d["inception_widths"] = [list(ws) for ws in self.inception_widths]
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class LstmState:
    h: np.ndarray
    c: np.ndarray

    @classmethod
    def zeros(cls, hidden, batch=None, dtype=np.float64):
        shape = (hidden,) if batch is None else (batch, hidden)
        return cls(np.zeros(shape, dtype=dtype), np.zeros(shape, dtype=dtype))


# ---------------------------------------------------------------- parameters

def _glorot(rng, shape, fan_in, fan_out, dtype):
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=shape).astype(dtype)


def _conv_init(rng, k, c, size, dtype):
    return _glorot(rng, (k, c, size, size), c * size * size, k * size * size, dtype), np.zeros(k, dtype=dtype)


def inception_param_shapes(in_ch, widths):
    w1, w3, w5, wp = widths
    return {
        "b1": (w1, in_ch, 1, 1),
        "b3r": (w3, in_ch, 1, 1),
        "b3": (w3, w3, 3, 3),
        "b5r": (w5, in_ch, 1, 1),
        "b5": (w5, w5, 5, 5),
        "bp": (wp, in_ch, 1, 1),
    }


def param_shapes(cfg: NetConfig):
    """Ordered ``name -> shape`` map of every learnable tensor."""
    shapes = {}
    ch = cfg.in_channels
    for k, widths in enumerate(cfg.inception_widths, 1):
        for br, shp in inception_param_shapes(ch, widths).items():
            shapes[f"inc{k}.{br}.W"] = shp
            shapes[f"inc{k}.{br}.b"] = (shp[0],)
        ch = sum(widths)
    h = cfg.lstm_hidden
    for layer, n in (("lstm1", cfg.feature_size), ("lstm2", h)):
        for g in GATES:
            shapes[f"{layer}.W_{g}"] = (h, n + h)
        for g in GATES:
            shapes[f"{layer}.b_{g}"] = (h,)
    shapes["reg.W"] = (7, h)
    shapes["reg.b"] = (7,)
    return shapes


def init_params(cfg: NetConfig, seed=0):
    """Glorot-uniform conv/dense weights, uniform(+-0.08) LSTM weights, forget bias 1."""
    rng = np.random.default_rng(seed)
    dt = cfg.dtype
    params = {}
    for name, shp in param_shapes(cfg).items():
        if name.startswith("inc"):
            if name.endswith(".W"):
                k, c, kh, kw = shp
                params[name] = _glorot(rng, shp, c * kh * kw, k * kh * kw, dt)
            else:
                params[name] = np.zeros(shp, dtype=dt)
        elif name.startswith("lstm"):
            if ".W_" in name:
                params[name] = rng.uniform(-0.08, 0.08, size=shp).astype(dt)
            else:
                fill = 1.0 if name.endswith("b_f") else 0.0
                params[name] = np.full(shp, fill, dtype=dt)
        elif name == "reg.W":
            params[name] = _glorot(rng, shp, shp[1], shp[0], dt)
        else:
            params[name] = np.zeros(shp, dtype=dt)
    return params


def zero_params(cfg: NetConfig):
    return {name: np.zeros(shp, dtype=cfg.dtype) for name, shp in param_shapes(cfg).items()}


def check_params(params, cfg: NetConfig):
    expected = param_shapes(cfg)
    if set(params) != set(expected):
        missing = sorted(set(expected) - set(params))
        extra = sorted(set(params) - set(expected))
        raise ConfigurationError(f"parameter set mismatch: missing={missing[:5]} extra={extra[:5]}")
    for name, shp in expected.items():
        if tuple(params[name].shape) != shp:
            raise ConfigurationError(f"{name} has shape {params[name].shape}, config needs {shp}")


def sub(params, prefix):
    """Block-local view of ``params``: ``'inc1.b1.W' -> 'b1.W'`` for prefix ``'inc1'``."""
    p = prefix + "."
    return {k[len(p):]: v for k, v in params.items() if k.startswith(p)}


# ---------------------------------------------------------------- inception

def _inception_fwd(x, bp):
    """Forward one inception block on ``x[N,C,H,W]``; returns ``(out, cache)``."""
    try:
        w1 = bp["b1.W"]
    except KeyError as exc:
        raise ConfigurationError(f"inception params missing {exc}") from None
    if x.shape[1] != w1.shape[1]:
        raise ConfigurationError(f"inception block expects {w1.shape[1]} channels, got {x.shape[1]}")
    cache = {"x": x}

    def conv_relu(tag, inp, pad):
        y = layers.nonlinearity(layers.conv2d_forward(inp, bp[f"{tag}.W"], bp[f"{tag}.b"], 1, pad), "relu")
        cache[tag] = (inp, y, pad)
        return y

    y1 = conv_relu("b1", x, 0)
    y3 = conv_relu("b3", conv_relu("b3r", x, 0), 1)
    y5 = conv_relu("b5", conv_relu("b5r", x, 0), 2)
    pooled, parg = layers.maxpool_forward(x, 3, 1, 1)
    cache["pool_arg"] = parg
    yp = conv_relu("bp", pooled, 0)
    cat = layers.channel_concat([y1, y3, y5, yp])
    out, arg = layers.maxpool_forward(cat, 2, 2, 0)
    cache["cat_shape"] = cat.shape
    cache["out_arg"] = arg
    cache["sizes"] = [y1.shape[1], y3.shape[1], y5.shape[1], yp.shape[1]]
    return out, cache


def _inception_bwd(dout, cache, bp):
    grads = {}

    def conv_relu_bwd(tag, dy):
        inp, y, pad = cache[tag]
        da = layers.nonlinearity_backward(y, dy, "relu")
        g = layers.conv2d_backward(inp, bp[f"{tag}.W"], da, 1, pad)
        grads[f"{tag}.W"] = g.param_grads["kernels"]
        grads[f"{tag}.b"] = g.param_grads["bias"]
        return g.input_grad

    dcat = layers.maxpool_backward(dout, cache["out_arg"], cache["cat_shape"])
    d1, d3, d5, dp = layers.channel_split(dcat, cache["sizes"])
    dx = conv_relu_bwd("b1", d1)
    dx = dx + conv_relu_bwd("b3r", conv_relu_bwd("b3", d3))
    dx = dx + conv_relu_bwd("b5r", conv_relu_bwd("b5", d5))
    dpool = conv_relu_bwd("bp", dp)
    dx = dx + layers.maxpool_backward(dpool, cache["pool_arg"], cache["x"].shape)
    return dx, grads


def inception_forward(x, block_params):
    """Apply one inception block to ``x`` (``[C,H,W]`` or ``[N,C,H,W]``).

    Four same-padded branches (1x1; 1x1->3x3; 1x1->5x5; 3x3 max-pool->1x1),
    each followed by ReLU, are concatenated and reduced by a 2x2/2 max-pool.
    """
    x = np.asarray(x)
    single = x.ndim == 3
    out, _ = _inception_fwd(x[None] if single else x, block_params)
    return out[0] if single else out


# ---------------------------------------------------------------- LSTM

def _stack_gates(lp):
    W = np.concatenate([lp[f"W_{g}"] for g in GATES], axis=0)
    b = np.concatenate([lp[f"b_{g}"] for g in GATES])
    return W, b


def _gate_split(a, h):
    return a[..., :h], a[..., h:2 * h], a[..., 2 * h:3 * h], a[..., 3 * h:]


def lstm_step(x, prev: LstmState, lp):
    """One LSTM update over the concatenated ``[x_k, h_{k-1}]``.

    f, i, o are sigmoid gates, g the tanh input modulation;
    ``c_k = f*c_{k-1} + i*g`` and ``h_k = o*tanh(c_k)``.
    """
    x = np.asarray(x)
    if not np.all(np.isfinite(x)):
        raise NumericError("lstm_step received non-finite input")
    h = lp["W_f"].shape[0]
    if lp["W_f"].shape[1] != x.shape[-1] + h or prev.h.shape[-1] != h:
        raise DimensionError(
            f"LSTM weights {lp['W_f'].shape} incompatible with input {x.shape} and hidden {prev.h.shape}")
    W, b = _stack_gates(lp)
    z = np.concatenate([x, prev.h], axis=-1)
    af, ai, ag, ao = _gate_split(z @ W.T + b, h)
    f = layers.sigmoid(af)
    i = layers.sigmoid(ai)
    g = np.tanh(ag)
    o = layers.sigmoid(ao)
    c = f * prev.c + i * g
    return LstmState(o * np.tanh(c), c)


def _lstm_seq_fwd(xs, init: LstmState, lp):
    """``xs[T,B,n]`` -> (``hs[T,B,h]``, final state, cache)."""
    T, B, n = xs.shape
    W, b = _stack_gates(lp)
    hdim = W.shape[0] // 4
    if W.shape[1] != n + hdim:
        raise DimensionError(f"LSTM input size {n} does not match weights {W.shape}")
    Wx, Wh = W[:, :n], W[:, n:]
    ax = (xs.reshape(T * B, n) @ Wx.T).reshape(T, B, 4 * hdim) + b
    hs = np.empty((T, B, hdim), dtype=xs.dtype)
    cs = np.empty((T, B, hdim), dtype=xs.dtype)
    gates = np.empty((T, B, 4 * hdim), dtype=xs.dtype)
    h_prev, c_prev = init.h, init.c
    for t in range(T):
        a = ax[t] + h_prev @ Wh.T
        af, ai, ag, ao = _gate_split(a, hdim)
        f = layers.sigmoid(af)
        i = layers.sigmoid(ai)
        g = np.tanh(ag)
        o = layers.sigmoid(ao)
        c = f * c_prev + i * g
        h_prev = o * np.tanh(c)
        c_prev = c
        hs[t], cs[t] = h_prev, c
        gates[t] = np.concatenate([f, i, g, o], axis=-1)
    if not (np.all(np.isfinite(hs)) and np.all(np.isfinite(cs))):
        raise NumericError("non-finite LSTM activations")
    cache = {"xs": xs, "h0": init.h, "c0": init.c, "hs": hs, "cs": cs, "gates": gates, "Wx": Wx, "Wh": Wh}
    return hs, LstmState(hs[-1].copy(), cs[-1].copy()), cache


def _lstm_seq_bwd(dhs, cache, dh_last=None, dc_last=None):
    """BPTT through a cached sequence.  Returns ``(dxs, grads, dh0, dc0)``."""
    xs, hs, cs, gates = cache["xs"], cache["hs"], cache["cs"], cache["gates"]
    Wx, Wh = cache["Wx"], cache["Wh"]
    T, B, n = xs.shape
    hdim = hs.shape[-1]
    dh_next = np.zeros((B, hdim), dtype=hs.dtype) if dh_last is None else dh_last
    dc_next = np.zeros((B, hdim), dtype=hs.dtype) if dc_last is None else dc_last
    das = np.empty((T, B, 4 * hdim), dtype=hs.dtype)
    dWh = np.zeros_like(Wh)
    for t in range(T - 1, -1, -1):
        f, i, g, o = _gate_split(gates[t], hdim)
        c_prev = cache["c0"] if t == 0 else cs[t - 1]
        h_prev = cache["h0"] if t == 0 else hs[t - 1]
        dh = dhs[t] + dh_next
        tc = np.tanh(cs[t])
        do = dh * tc
        dc = dc_next + dh * o * (1 - tc * tc)
        da = np.concatenate([
            dc * c_prev * f * (1 - f),
            dc * g * i * (1 - i),
            dc * i * (1 - g * g),
            do * o * (1 - o),
        ], axis=-1)
        das[t] = da
        dWh += da.T @ h_prev
        dh_next = da @ Wh
        dc_next = dc * f
    da2 = das.reshape(T * B, 4 * hdim)
    dWx = da2.T @ xs.reshape(T * B, n)
    db = da2.sum(axis=0)
    dxs = (da2 @ Wx).reshape(T, B, n)
    dW = np.concatenate([dWx, dWh], axis=1)
    grads = {}
    for k, gname in enumerate(GATES):
        grads[f"W_{gname}"] = dW[k * hdim:(k + 1) * hdim]
        grads[f"b_{gname}"] = db[k * hdim:(k + 1) * hdim]
    return dxs, grads, dh_next, dc_next


def lstm_sequence_forward(xs, init: LstmState, lp):
    """Fold :func:`lstm_step` over ``xs`` (sequence of ``[n]`` or ``[B,n]``).

    Returns the list of states after each step.
    """
    xs = [np.asarray(x) for x in xs]
    if not xs:
        raise DimensionError("lstm_sequence_forward needs a non-empty sequence")
    states = []
    state = init
    for x in xs:
        state = lstm_step(x, state, lp)
        states.append(state)
    return states


# ---------------------------------------------------------------- full model

@dataclass
class ForwardCache:
    inception: list
    feat_shape: tuple
    drop1: np.ndarray
    lstm1: dict
    drop2: np.ndarray
    lstm2: dict
    h2: np.ndarray
    consumed: bool = field(default=False)


class EndoVONet:
    """Parameters plus batched forward/backward over ``[T, B, 8, H, W]`` windows."""

    def __init__(self, cfg: NetConfig, params=None, seed=0):
        self.cfg = cfg
        self.params = init_params(cfg, seed) if params is None else params
        check_params(self.params, cfg)

    def initial_states(self, batch):
        h = self.cfg.lstm_hidden
        dt = self.cfg.dtype
        return LstmState.zeros(h, batch, dt), LstmState.zeros(h, batch, dt)

    def forward(self, pairs, states=None, train=False, rng=None):
        """Run a window of frame pairs.

        Returns ``(raw[T,B,7], (state1, state2), cache)``.
        """
        cfg = self.cfg
        pairs = np.asarray(pairs, dtype=cfg.dtype)
        if pairs.ndim != 5 or pairs.shape[2:] != (cfg.in_channels, cfg.height, cfg.width):
            raise ConfigurationError(
                f"expected pairs [T,B,{cfg.in_channels},{cfg.height},{cfg.width}], got {pairs.shape}")
        T, B = pairs.shape[:2]
        s1, s2 = states if states is not None else self.initial_states(B)
        p = self.params
        x = pairs.reshape((T * B,) + pairs.shape[2:])
        inc_caches = []
        for k in range(1, 4):
            x, c = _inception_fwd(x, sub(p, f"inc{k}"))
            inc_caches.append(c)
        feat_shape = x.shape
        feat = x.reshape(T, B, -1)
        mode = "train" if train else "eval"
        if rng is None:
            rng = np.random.default_rng(0)
        feat, m1 = layers.dropout(feat, cfg.dropout_rate, rng, mode)
        h1, s1n, c1 = _lstm_seq_fwd(feat, s1, sub(p, "lstm1"))
        h1d, m2 = layers.dropout(h1, cfg.dropout_rate, rng, mode)
        h2, s2n, c2 = _lstm_seq_fwd(h1d, s2, sub(p, "lstm2"))
        raw = layers.dense_forward(h2, p["reg.W"], p["reg.b"])
        cache = ForwardCache(inc_caches, feat_shape, m1, c1, m2, c2, h2)
        return raw, (s1n, s2n), cache

    def backward(self, cache, d_raw):
        """Exact BPTT gradients of ``sum(d_raw * raw)`` w.r.t. every parameter.

        Gradient does not flow into the incoming recurrent states (truncated
        BPTT at window boundaries).
        """
        if cache is None or not isinstance(cache, ForwardCache):
            raise StateError("backward needs the cache returned by forward")
        if cache.consumed:
            raise StateError("forward cache already used for a backward pass")
        p = self.params
        d_raw = np.asarray(d_raw, dtype=self.cfg.dtype)
        if d_raw.shape != cache.h2.shape[:2] + (7,):
            raise DimensionError(f"output gradient shape {d_raw.shape} does not match forward output")
        grads = {}
        g = layers.dense_backward(cache.h2, p["reg.W"], d_raw)
        grads["reg.W"], grads["reg.b"] = g.param_grads["W"], g.param_grads["b"]
        dh1d, g2, _, _ = _lstm_seq_bwd(g.input_grad, cache.lstm2)
        grads.update({f"lstm2.{k}": v for k, v in g2.items()})
        dh1 = layers.dropout_backward(dh1d, cache.drop2)
        dfeat, g1, _, _ = _lstm_seq_bwd(dh1, cache.lstm1)
        grads.update({f"lstm1.{k}": v for k, v in g1.items()})
        dfeat = layers.dropout_backward(dfeat, cache.drop1)
        dx = dfeat.reshape(cache.feat_shape)
        for k in range(3, 0, -1):
            dx, gk = _inception_bwd(dx, cache.inception[k - 1], sub(p, f"inc{k}"))
            grads.update({f"inc{k}.{name}": v for name, v in gk.items()})
        cache.consumed = True
        return {name: grads[name] for name in p}


def model_forward(pair, state1, state2, params, cfg: NetConfig):
    """Single-pair forward: ``pair[8,H,W]`` -> ``(raw[7], state1, state2)``."""
    net = EndoVONet(cfg, params)
    h = cfg.lstm_hidden

    def batched(s):
        return LstmState(np.asarray(s.h, dtype=cfg.dtype).reshape(1, h), np.asarray(s.c, dtype=cfg.dtype).reshape(1, h))

    raw, (s1, s2), _ = net.forward(np.asarray(pair)[None, None], (batched(state1), batched(state2)))
    unb = lambda s: LstmState(s.h[0], s.c[0])  # noqa: E731
    return raw[0, 0], unb(s1), unb(s2)


def model_backward(net: EndoVONet, cache, d_raw):
    return net.backward(cache, d_raw)


def extract_pose(raw):
    """Split raw output into translation and a canonical unit quaternion."""
    raw = np.asarray(raw, dtype=float).reshape(7)
    if not np.all(np.isfinite(raw)):
        raise NumericError("non-finite network output")
    q = canonicalize(quat_normalize(raw[3:]))
    return RelativePose(raw[:3].copy(), q)
