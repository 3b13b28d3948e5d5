"""Feature mapping network: all frame features in, one predicted pooled feature out.

Two variants share one parameter container:

* ``transformer``: sinusoidal positions, scaled by ``pos_scale``, are added
  to the frame features, then ``layers`` pre-norm encoder blocks run::

      x = x + MHA(LN1(x))
      x = x + W2 @ gelu(W1 @ LN2(x) + b1) + b2

  and the output rows are mean-pooled.  Attention has no q/k/v biases and the
  output projection has none either.
* ``mlp``: mean-pool the frames first, then ``W2 @ gelu(W1 @ x + b1) + b2``.

Training minimises cosine distance to the target pooled feature.  Gradients
are derived by hand (no autodiff) and checked against central differences in
the test suite.

SMSM model file (little-endian)::

    bytes 0-3   b"SMSM"
    u32         version (1)
    u32         header length in bytes
    bytes       UTF-8 JSON header: variant, d, heads, layers, hidden, pos_scale,
                tensors (list of [name, shape] in storage order)
    f64 ...     tensors in header order, each C-contiguous

Tensor order for the transformer is, per layer ``l``: ``l.ln1.gain``,
``l.ln1.bias``, ``l.attn.wq``, ``l.attn.wk``, ``l.attn.wv`` (each
heads x d x d/heads), ``l.attn.wo``, ``l.ln2.gain``, ``l.ln2.bias``,
``l.ffn.w1``, ``l.ffn.b1``, ``l.ffn.w2``, ``l.ffn.b2``.  The MLP stores
``w1``, ``b1``, ``w2``, ``b2``.
"""

import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

from .errors import ArgumentError, DataError, DivergenceError, FormatError

MAGIC = b"SMSM"
VERSION = 1
LN_EPS = 1e-5
_SQRT1_2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x):
    return 0.5 * x * (1.0 + erf(x * _SQRT1_2))


def gelu_grad(x):
    return 0.5 * (1.0 + erf(x * _SQRT1_2)) + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)


def positional_encoding(m, d):
    pos = np.arange(m)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


def cosine_loss(pred, target):
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    np_, nt = np.linalg.norm(pred), np.linalg.norm(target)
    if np_ == 0 or nt == 0:
        raise ArgumentError("cosine loss of a zero vector")
    return 1.0 - float(pred @ target) / (np_ * nt)


def cosine_loss_grad(pred, target):
    """Gradient of ``cosine_loss`` with respect to ``pred``."""
    np_, nt = np.linalg.norm(pred), np.linalg.norm(target)
    if np_ == 0 or nt == 0:
        raise ArgumentError("cosine loss of a zero vector")
    cos = float(pred @ target) / (np_ * nt)
    return -(target / (np_ * nt) - cos * pred / (np_ * np_))


# --------------------------------------------------------------------------
# parameters

@dataclass
class MapperParams:
    variant: str
    d: int
    hidden: int
    heads: int = 1
    layers: int = 0
    tensors: dict = field(default_factory=dict)
    # amplitude of the positional encoding added to the inputs
    pos_scale: float = 1.0

    def names(self):
        return list(self.tensors)

    def copy(self):
        return MapperParams(self.variant, self.d, self.hidden, self.heads, self.layers,
                            {k: v.copy() for k, v in self.tensors.items()}, self.pos_scale)

    def zeros_like(self):
        return {k: np.zeros_like(v) for k, v in self.tensors.items()}

    def header(self):
        return {"variant": self.variant, "d": self.d, "hidden": self.hidden, "heads": self.heads,
                "layers": self.layers, "pos_scale": self.pos_scale,
                "tensors": [[k, list(v.shape)] for k, v in self.tensors.items()]}


def _layer_shapes(d, heads, hidden):
    dh = d // heads
    return [("ln1.gain", (d,)), ("ln1.bias", (d,)),
            ("attn.wq", (heads, d, dh)), ("attn.wk", (heads, d, dh)), ("attn.wv", (heads, d, dh)),
            ("attn.wo", (d, d)),
            ("ln2.gain", (d,)), ("ln2.bias", (d,)),
            ("ffn.w1", (d, hidden)), ("ffn.b1", (hidden,)),
            ("ffn.w2", (hidden, d)), ("ffn.b2", (d,))]


def param_shapes(variant, d, hidden, heads=1, layers=0):
    if variant == "mlp":
        return [("w1", (d, hidden)), ("b1", (hidden,)), ("w2", (hidden, d)), ("b2", (d,))]
    if variant == "transformer":
        if heads < 1 or d % heads:
            raise ArgumentError(f"model dim {d} is not divisible by {heads} heads")
        if layers < 1:
            raise ArgumentError("transformer needs at least one layer")
        return [(f"{l}.{name}", shape) for l in range(layers)
                for name, shape in _layer_shapes(d, heads, hidden)]
    raise ArgumentError(f"unknown mapper variant {variant!r}")


def init_params(variant, d, hidden=64, heads=4, layers=2, seed=0, scale=1.0, pos_scale=None):
    """Gaussian weights with std ``scale / sqrt(fan_in)``; zero biases, unit LN gains.

    ``pos_scale`` defaults to ``1/sqrt(d)``: a raw sinusoid row has norm
    ``sqrt(d/2)`` and would otherwise swamp unit-scale features.
    """
    if d < 1 or hidden < 1:
        raise ArgumentError("d and hidden must be >= 1")
    if pos_scale is None:
        pos_scale = 1.0 / math.sqrt(d)
    if not (pos_scale >= 0 and math.isfinite(pos_scale)):
        raise ArgumentError("pos_scale must be a finite value >= 0")
    if variant == "mlp":
        heads, layers = 1, 0
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in param_shapes(variant, d, hidden, heads, layers):
        leaf = name.rsplit(".", 1)[-1]
        if leaf.endswith("gain"):
            tensors[name] = np.ones(shape)
        elif leaf.startswith("b") or leaf == "bias":
            tensors[name] = np.zeros(shape)
        else:
            fan_in = shape[-2]
            tensors[name] = scale / math.sqrt(fan_in) * rng.standard_normal(shape)
    return MapperParams(variant, d, hidden, heads, layers, tensors, float(pos_scale))


# --------------------------------------------------------------------------
# forward / backward

def _layer_norm(x, gain, bias):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + LN_EPS)
    xhat = xc * inv
    return xhat * gain + bias, (xhat, inv)


def _layer_norm_back(dy, gain, cache):
    xhat, inv = cache
    dgain = (dy * xhat).sum(axis=0)
    dbias = dy.sum(axis=0)
    dxhat = dy * gain
    dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, dgain, dbias


def _check_inputs(params, rows):
    rows = np.asarray(rows, dtype=np.float64)
    if rows.ndim != 2 or rows.shape[0] < 1:
        raise ArgumentError("mapper input must be an m x d matrix with m >= 1")
    if rows.shape[1] != params.d:
        raise ArgumentError(f"input dim {rows.shape[1]} != model dim {params.d}")
    return rows


def _forward(params, rows):
    T = params.tensors
    if params.variant == "mlp":
        x = rows.mean(axis=0)
        z1 = x @ T["w1"] + T["b1"]
        a1 = gelu(z1)
        out = a1 @ T["w2"] + T["b2"]
        return out, {"x": x, "z1": z1, "a1": a1, "m": rows.shape[0]}

    m, d = rows.shape
    dh = d // params.heads
    x = rows + params.pos_scale * positional_encoding(m, d)
    caches = []
    for l in range(params.layers):
        p = lambda name: T[f"{l}.{name}"]
        a_in, ln1 = _layer_norm(x, p("ln1.gain"), p("ln1.bias"))
        q = np.einsum("md,hde->hme", a_in, p("attn.wq"))
        k = np.einsum("md,hde->hme", a_in, p("attn.wk"))
        v = np.einsum("md,hde->hme", a_in, p("attn.wv"))
        s = q @ k.transpose(0, 2, 1) / math.sqrt(dh)
        s = s - s.max(axis=-1, keepdims=True)
        attn = np.exp(s)
        attn /= attn.sum(axis=-1, keepdims=True)
        o = attn @ v                                   # heads x m x dh
        o_cat = o.transpose(1, 0, 2).reshape(m, d)
        x = x + o_cat @ p("attn.wo")
        f_in, ln2 = _layer_norm(x, p("ln2.gain"), p("ln2.bias"))
        hpre = f_in @ p("ffn.w1") + p("ffn.b1")
        hact = gelu(hpre)
        x = x + hact @ p("ffn.w2") + p("ffn.b2")
        caches.append(dict(a_in=a_in, ln1=ln1, q=q, k=k, v=v, attn=attn, o_cat=o_cat,
                           f_in=f_in, ln2=ln2, hpre=hpre, hact=hact))
    return x.mean(axis=0), {"layers": caches, "m": m}


def forward(params, inputs):
    """Predicted pooled feature for one video (``FeatureMatrix`` or m x d array)."""
    rows = getattr(inputs, "rows", inputs)
    out, _ = _forward(params, _check_inputs(params, rows))
    return out


def attention_weights(params, inputs):
    """Per-layer attention matrices (heads x m x m), for inspection."""
    rows = _check_inputs(params, getattr(inputs, "rows", inputs))
    if params.variant != "transformer":
        raise ArgumentError("only the transformer variant has attention")
    _, cache = _forward(params, rows)
    return [c["attn"] for c in cache["layers"]]


def _backward(params, cache, dout):
    T = params.tensors
    grads = {}
    if params.variant == "mlp":
        grads["w2"] = np.outer(cache["a1"], dout)
        grads["b2"] = dout.copy()
        dz1 = (dout @ T["w2"].T) * gelu_grad(cache["z1"])
        grads["w1"] = np.outer(cache["x"], dz1)
        grads["b1"] = dz1
        return grads

    m = cache["m"]
    d = params.d
    heads = params.heads
    dh = d // heads
    dx = np.broadcast_to(dout / m, (m, d)).copy()
    for l in reversed(range(params.layers)):
        c = cache["layers"][l]
        p = lambda name: T[f"{l}.{name}"]
        g = lambda name, val: grads.__setitem__(f"{l}.{name}", val)

        # feed-forward branch
        g("ffn.w2", c["hact"].T @ dx)
        g("ffn.b2", dx.sum(axis=0))
        dhpre = (dx @ p("ffn.w2").T) * gelu_grad(c["hpre"])
        g("ffn.w1", c["f_in"].T @ dhpre)
        g("ffn.b1", dhpre.sum(axis=0))
        df_in = dhpre @ p("ffn.w1").T
        dln, dgain, dbias = _layer_norm_back(df_in, p("ln2.gain"), c["ln2"])
        g("ln2.gain", dgain)
        g("ln2.bias", dbias)
        dx = dx + dln

        # attention branch
        g("attn.wo", c["o_cat"].T @ dx)
        do = (dx @ p("attn.wo").T).reshape(m, heads, dh).transpose(1, 0, 2)
        attn, q, k, v = c["attn"], c["q"], c["k"], c["v"]
        dattn = do @ v.transpose(0, 2, 1)
        dv = attn.transpose(0, 2, 1) @ do
        ds = attn * (dattn - (dattn * attn).sum(axis=-1, keepdims=True)) / math.sqrt(dh)
        dq = ds @ k
        dk = ds.transpose(0, 2, 1) @ q
        a_in = c["a_in"]
        g("attn.wq", np.einsum("md,hme->hde", a_in, dq))
        g("attn.wk", np.einsum("md,hme->hde", a_in, dk))
        g("attn.wv", np.einsum("md,hme->hde", a_in, dv))
        da_in = (np.einsum("hme,hde->md", dq, p("attn.wq"))
                 + np.einsum("hme,hde->md", dk, p("attn.wk"))
                 + np.einsum("hme,hde->md", dv, p("attn.wv")))
        dln, dgain, dbias = _layer_norm_back(da_in, p("ln1.gain"), c["ln1"])
        g("ln1.gain", dgain)
        g("ln1.bias", dbias)
        dx = dx + dln
    return {name: grads[name] for name in T}


@dataclass
class TrainingExample:
    inputs: np.ndarray
    target: np.ndarray
    video_id: str = ""

    def __post_init__(self):
        self.inputs = np.asarray(getattr(self.inputs, "rows", self.inputs), dtype=np.float64)
        self.target = np.asarray(self.target, dtype=np.float64)
        if not np.any(self.target):
            raise DataError(f"zero-norm target for {self.video_id or 'example'}")


def loss_and_grad(params, example):
    rows = _check_inputs(params, example.inputs)
    out, cache = _forward(params, rows)
    loss = cosine_loss(out, example.target)
    return loss, _backward(params, cache, cosine_loss_grad(out, example.target))


def backward(params, example):
    """Exact gradient of the cosine loss with respect to every tensor."""
    return loss_and_grad(params, example)[1]


def example_loss(params, example):
    return cosine_loss(forward(params, example.inputs), example.target)


def gradient_check(params, example, step=1e-6):
    """Compare analytic gradients with central differences.

    Returns ``{tensor_name: relative_error}`` where the error of a tensor is
    ``|analytic - numeric| / max(|analytic| + |numeric|, 1e-12)`` in the
    2-norm over its entries.
    """
    analytic = backward(params, example)
    work = params.copy()
    errors = {}
    for name, tensor in work.tensors.items():
        numeric = np.zeros_like(tensor)
        flat = tensor.reshape(-1)
        num_flat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = example_loss(work, example)
            flat[i] = orig - step
            down = example_loss(work, example)
            flat[i] = orig
            num_flat[i] = (up - down) / (2 * step)
        a = analytic[name]
        denom = max(np.linalg.norm(a) + np.linalg.norm(numeric), 1e-12)
        errors[name] = float(np.linalg.norm(a - numeric) / denom)
    return errors


# --------------------------------------------------------------------------
# training

@dataclass
class TrainConfig:
    learning_rate: float = 3e-3
    epochs: int = 200
    batch_size: int = 16
    seed: int = 0
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_init_scale: float = 1.0
    # decoupled (AdamW-style) decay applied to weight matrices only
    weight_decay: float = 0.0
    # "constant", or "cosine" annealing from learning_rate to 0 over the epochs
    schedule: str = "constant"

    def validate(self):
        if not self.learning_rate > 0:
            raise ArgumentError("learning_rate must be > 0")
        if self.epochs < 1:
            raise ArgumentError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ArgumentError("batch_size must be >= 1")
        if self.weight_decay < 0:
            raise ArgumentError("weight_decay must be >= 0")
        if self.optimizer not in ("adam", "sgd"):
            raise ArgumentError(f"unknown optimizer {self.optimizer!r}")
        if self.schedule not in ("constant", "cosine"):
            raise ArgumentError(f"unknown schedule {self.schedule!r}")


@dataclass
class TrainReport:
    variant: str
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)

    def to_json(self):
        return {"variant": self.variant, "train_loss": self.train_loss, "val_loss": self.val_loss}


def mean_loss(params, examples):
    return float(np.mean([example_loss(params, e) for e in examples]))


def train(dataset, params, config, validation=None):
    """Mini-batch training on cosine distance.

    ``report.train_loss[0]`` and ``report.val_loss[0]`` are measured before
    the first update; entry ``e`` is the mean after epoch ``e``.
    """
    config.validate()
    if not dataset:
        raise ArgumentError("empty training set")
    params = params.copy()
    rng = np.random.default_rng(config.seed)
    report = TrainReport(params.variant)
    report.train_loss.append(mean_loss(params, dataset))
    if validation:
        report.val_loss.append(mean_loss(params, validation))

    m1 = params.zeros_like()
    m2 = params.zeros_like()
    step = 0
    for epoch in range(1, config.epochs + 1):
        lr = config.learning_rate
        if config.schedule == "cosine":
            lr *= 0.5 * (1.0 + math.cos(math.pi * (epoch - 1) / config.epochs))
        order = rng.permutation(len(dataset))
        total = 0.0
        for start in range(0, len(order), config.batch_size):
            batch = order[start:start + config.batch_size]
            acc = params.zeros_like()
            for i in batch:
                loss, grads = loss_and_grad(params, dataset[i])
                total += loss
                for name, gv in grads.items():
                    acc[name] += gv
            if not math.isfinite(total):
                raise DivergenceError(epoch)
            step += 1
            for name, tensor in params.tensors.items():
                gv = acc[name] / len(batch)
                if config.weight_decay and tensor.ndim > 1:
                    tensor -= lr * config.weight_decay * tensor
                if config.optimizer == "sgd":
                    tensor -= lr * gv
                    continue
                m1[name] = config.beta1 * m1[name] + (1 - config.beta1) * gv
                m2[name] = config.beta2 * m2[name] + (1 - config.beta2) * gv * gv
                mhat = m1[name] / (1 - config.beta1 ** step)
                vhat = m2[name] / (1 - config.beta2 ** step)
                tensor -= lr * mhat / (np.sqrt(vhat) + config.eps)
        if not all(np.all(np.isfinite(t)) for t in params.tensors.values()):
            raise DivergenceError(epoch)
        report.train_loss.append(total / len(dataset))
        if validation:
            report.val_loss.append(mean_loss(params, validation))
    return params, report


# --------------------------------------------------------------------------
# model files

_PREFIX = struct.Struct("<4sII")


def save_params(path, params):
    header = json.dumps(params.header(), sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, VERSION, len(header)))
        fh.write(header)
        for tensor in params.tensors.values():
            fh.write(np.ascontiguousarray(tensor, dtype="<f8").tobytes())


def load_params(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _PREFIX.size:
        raise FormatError(f"{path}: truncated model file")
    magic, version, hlen = _PREFIX.unpack_from(blob)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported model version {version}")
    try:
        header = json.loads(blob[_PREFIX.size:_PREFIX.size + hlen].decode("utf-8"))
        variant, d, hidden = header["variant"], header["d"], header["hidden"]
        heads, layers = header["heads"], header["layers"]
        pos_scale = float(header.get("pos_scale", 1.0))
        stored = [(name, tuple(shape)) for name, shape in header["tensors"]]
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"{path}: bad model header ({exc})") from exc
    try:
        expected = param_shapes(variant, d, hidden, heads, layers)
    except ArgumentError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    if stored != [(n, tuple(s)) for n, s in expected]:
        raise FormatError(f"{path}: tensor table does not match the declared architecture")
    offset = _PREFIX.size + hlen
    need = sum(8 * math.prod(s) for _, s in stored)
    if len(blob) - offset != need:
        raise FormatError(f"{path}: payload has {len(blob) - offset} bytes, expected {need}")
    tensors = {}
    for name, shape in stored:
        count = math.prod(shape)
        tensors[name] = np.frombuffer(blob, dtype="<f8", count=count, offset=offset).reshape(shape).copy()
        offset += 8 * count
    return MapperParams(variant, d, hidden, heads, layers, tensors, pos_scale)
