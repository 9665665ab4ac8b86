"""Fully-connected CSI autoencoder with batch normalization, written against numpy.

Encoder: FC(D -> beta*L) -> BatchNorm -> act -> FC(beta*L -> L)
Decoder: FC(L -> beta*L) -> BatchNorm -> act -> FC(beta*L -> D)

``act`` is ``tanh`` by default or the identity (``"linear"``). Weights are
stored as (in_dim, out_dim) so a forward layer is ``x @ W + b``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Optional

import numpy as np

from .errors import ConfigError, NumericFailure

ACTIVATIONS = ("linear", "tanh")
INFER_CHUNK = 64  # fixed GEMM shape, keeps inference bit-identical across batch sizes


@dataclass(frozen=True)
class LayerSpec:
    n_t: int = 64
    n_c: int = 32
    codeword_len: int = 64
    width_factor: int = 16
    activation: str = "tanh"

    def __post_init__(self):
        if min(self.n_t, self.n_c, self.codeword_len, self.width_factor) < 1:
            raise ConfigError("n_t, n_c, codeword_len and width_factor must all be >= 1")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"activation must be one of {ACTIVATIONS}, got {self.activation!r}")
        if self.input_dim < self.codeword_len:
            raise ConfigError("codeword_len cannot exceed the input dimension")

    @property
    def input_dim(self) -> int:
        return 2 * self.n_t * self.n_c

    @property
    def hidden(self) -> int:
        return self.width_factor * self.codeword_len


def param_layout(spec: LayerSpec) -> list[tuple[str, tuple, bool]]:
    """(name, shape, trainable) in declaration order: encoder first, then decoder."""
    D, H, L = spec.input_dim, spec.hidden, spec.codeword_len
    layout = []
    for part, (d_in, d_out) in (("enc", (D, L)), ("dec", (L, D))):
        layout += [
            (f"{part}.fc1.weight", (d_in, H), True),
            (f"{part}.fc1.bias", (H,), True),
            (f"{part}.bn.scale", (H,), True),
            (f"{part}.bn.shift", (H,), True),
            (f"{part}.bn.running_mean", (H,), False),
            (f"{part}.bn.running_var", (H,), False),
            (f"{part}.fc2.weight", (H, d_out), True),
            (f"{part}.fc2.bias", (d_out,), True),
        ]
    return layout


@dataclass(eq=False)
class ModelParams:
    spec: LayerSpec
    tensors: dict
    bn_eps: float = 1e-5

    @property
    def dtype(self):
        return self.tensors["enc.fc1.weight"].dtype

    def trainable_names(self):
        return [n for n, _, t in param_layout(self.spec) if t]

    def copy(self) -> "ModelParams":
        return ModelParams(self.spec, {k: v.copy() for k, v in self.tensors.items()}, self.bn_eps)

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(self.spec, {k: v.astype(dtype) for k, v in self.tensors.items()}, self.bn_eps)

    def validate(self):
        for name, shape, _ in param_layout(self.spec):
            t = self.tensors.get(name)
            if t is None or t.shape != shape:
                raise ConfigError(f"tensor {name} missing or has wrong shape (want {shape})")
            if not np.all(np.isfinite(t)):
                raise NumericFailure(f"tensor {name} has non-finite entries")
        for part in ("enc", "dec"):
            if np.any(self.tensors[f"{part}.bn.running_var"] <= 0):
                raise NumericFailure(f"{part} batch-norm running variance must be positive")

    def encoder_payload(self) -> np.ndarray:
        """Trainable encoder parameters, flattened. This is what a UE downloads."""
        names = [n for n, _, t in param_layout(self.spec) if t and n.startswith("enc.")]
        return np.concatenate([self.tensors[n].ravel() for n in names])


def init_model(spec: LayerSpec, seed, dtype=np.float64) -> ModelParams:
    """Glorot-uniform weights, zero biases, identity batch-norm."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape, _ in param_layout(spec):
        if name.endswith(".weight"):
            bound = math.sqrt(6.0 / (shape[0] + shape[1]))
            t = rng.uniform(-bound, bound, size=shape)
        elif name.endswith((".scale", ".running_var")):
            t = np.ones(shape)
        else:
            t = np.zeros(shape)
        tensors[name] = t.astype(dtype)
    return ModelParams(spec, tensors)


# forward pass


def _activate(y, kind):
    return np.tanh(y) if kind == "tanh" else y


def _affine_infer(x, W, b):
    n = len(x)
    out = np.empty((n, W.shape[1]), dtype=np.result_type(x, W))
    buf = np.zeros((INFER_CHUNK, W.shape[0]), dtype=x.dtype)
    for s in range(0, n, INFER_CHUNK):
        blk = x[s : s + INFER_CHUNK]
        buf[: len(blk)] = blk
        buf[len(blk) :] = 0
        out[s : s + len(blk)] = (buf @ W)[: len(blk)]
    return out + b


def _block_infer(model, part, x):
    p, spec = model.tensors, model.spec
    z = _affine_infer(x, p[f"{part}.fc1.weight"], p[f"{part}.fc1.bias"])
    xh = (z - p[f"{part}.bn.running_mean"]) / np.sqrt(p[f"{part}.bn.running_var"] + model.bn_eps)
    a = _activate(p[f"{part}.bn.scale"] * xh + p[f"{part}.bn.shift"], spec.activation)
    return _affine_infer(a, p[f"{part}.fc2.weight"], p[f"{part}.fc2.bias"])


def _block_train(model, part, x, cache):
    p, spec = model.tensors, model.spec
    z = x @ p[f"{part}.fc1.weight"] + p[f"{part}.fc1.bias"]
    mean, var = z.mean(axis=0), z.var(axis=0)
    istd = 1.0 / np.sqrt(var + model.bn_eps)
    xh = (z - mean) * istd
    a = _activate(p[f"{part}.bn.scale"] * xh + p[f"{part}.bn.shift"], spec.activation)
    out = a @ p[f"{part}.fc2.weight"] + p[f"{part}.fc2.bias"]
    cache[part] = dict(x=x, mean=mean, var=var, istd=istd, xh=xh, a=a)
    return out


def _as_batch(x, dim, what):
    x = np.asarray(x)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.ndim != 2 or x.shape[1] != dim:
        raise ConfigError(f"{what} must have length {dim}, got shape {np.shape(x)}")
    return x, single


def _run(model, part, x, mode, dim, what):
    xb, single = _as_batch(x, dim, what)
    xb = xb.astype(model.dtype, copy=False)
    if mode == "infer":
        out = _block_infer(model, part, xb)
    elif mode == "train":
        if len(xb) < 2:
            raise ConfigError("train mode needs a batch of at least 2 samples")
        out = _block_train(model, part, xb, {})
    else:
        raise ConfigError(f"mode must be 'train' or 'infer', got {mode!r}")
    return out[0] if single else out


def encode(model: ModelParams, x, mode: str = "infer") -> np.ndarray:
    """Codeword(s) for one input vector or a batch of rows."""
    return _run(model, "enc", x, mode, model.spec.input_dim, "input")


def decode(model: ModelParams, s, mode: str = "infer") -> np.ndarray:
    return _run(model, "dec", s, mode, model.spec.codeword_len, "codeword")


def reconstruct(model: ModelParams, x) -> np.ndarray:
    """decode(encode(x)) in inference mode."""
    return decode(model, encode(model, x))


def forward_train(model: ModelParams, x):
    """Train-mode forward pass. Returns (reconstruction, cache)."""
    cache = {}
    s = _block_train(model, "enc", x, cache)
    out = _block_train(model, "dec", s, cache)
    return out, cache


# backward pass


def _block_backward(model, part, dout, c, grads, need_input_grad=True):
    p = model.tensors
    n = len(dout)
    grads[f"{part}.fc2.weight"] = c["a"].T @ dout
    grads[f"{part}.fc2.bias"] = dout.sum(axis=0)
    da = dout @ p[f"{part}.fc2.weight"].T
    dy = da * (1.0 - c["a"] ** 2) if model.spec.activation == "tanh" else da
    grads[f"{part}.bn.scale"] = (dy * c["xh"]).sum(axis=0)
    grads[f"{part}.bn.shift"] = dy.sum(axis=0)
    dxh = dy * p[f"{part}.bn.scale"]
    dz = (c["istd"] / n) * (n * dxh - dxh.sum(axis=0) - c["xh"] * (dxh * c["xh"]).sum(axis=0))
    grads[f"{part}.fc1.weight"] = c["x"].T @ dz
    grads[f"{part}.fc1.bias"] = dz.sum(axis=0)
    return dz @ p[f"{part}.fc1.weight"].T if need_input_grad else None


def loss_and_gradients(model: ModelParams, batch, momentum: Optional[float] = 0.1):
    """Reconstruction MSE ``mean_i ||x_i - f(x_i)||^2`` and its exact gradients.

    With ``momentum`` set, the batch-norm running statistics are updated in
    place (exponential moving average, unbiased batch variance). Pass
    ``momentum=None`` for a side-effect-free evaluation.
    """
    x, _ = _as_batch(batch, model.spec.input_dim, "input")
    if len(x) < 2:
        raise ConfigError("loss_and_gradients needs a batch of at least 2 samples")
    x = x.astype(model.dtype, copy=False)
    out, cache = forward_train(model, x)
    if not np.all(np.isfinite(out)):
        raise NumericFailure("non-finite values in the forward pass")
    n = len(x)
    diff = out - x
    mse = float(np.sum(diff * diff) / n)

    grads = {}
    ds = _block_backward(model, "dec", 2.0 * diff / n, cache["dec"], grads)
    _block_backward(model, "enc", ds, cache["enc"], grads, need_input_grad=False)

    if momentum is not None:
        p = model.tensors
        for part in ("enc", "dec"):
            c = cache[part]
            p[f"{part}.bn.running_mean"] *= 1 - momentum
            p[f"{part}.bn.running_mean"] += momentum * c["mean"]
            p[f"{part}.bn.running_var"] *= 1 - momentum
            p[f"{part}.bn.running_var"] += momentum * c["var"] * (n / (n - 1))
    return mse, grads


# training


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 256
    epochs: int = 50
    seed: int = 0
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5
    lr_schedule: str = "constant"  # or "cosine": decays to final_lr_fraction * learning_rate
    final_lr_fraction: float = 0.01
    recalibrate_bn: bool = True  # replace running stats with full-data statistics after training

    def __post_init__(self):
        if self.lr_schedule not in ("constant", "cosine"):
            raise ConfigError(f"lr_schedule must be 'constant' or 'cosine', got {self.lr_schedule!r}")
        for name in ("learning_rate", "beta1", "beta2", "adam_eps", "bn_momentum", "bn_eps"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 for batch statistics")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")

    def lr_at(self, epoch: int) -> float:
        """Learning rate for a 0-based epoch."""
        if self.lr_schedule == "constant" or self.epochs == 1:
            return self.learning_rate
        lo = self.learning_rate * self.final_lr_fraction
        frac = epoch / (self.epochs - 1)
        return lo + 0.5 * (self.learning_rate - lo) * (1 + math.cos(math.pi * frac))


@dataclass
class TrainReport:
    loss_curve: list = field(default_factory=list)
    final_mse: float = float("nan")
    epochs_run: int = 0


class Adam:
    """Adam over a set of named tensors, updated in place."""

    def __init__(self, params: dict, names, lr, beta1, beta2, eps):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {n: np.zeros_like(params[n]) for n in names}
        self.v = {n: np.zeros_like(params[n]) for n in names}
        self._tmp = {n: np.empty_like(params[n]) for n in names}

    def step(self, params: dict, grads: dict, lr=None):
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for n, g in grads.items():
            m, v, tmp = self.m[n], self.v[n], self._tmp[n]
            m *= self.b1
            np.multiply(g, 1 - self.b1, out=tmp)
            m += tmp
            v *= self.b2
            np.multiply(g, g, out=tmp)
            tmp *= 1 - self.b2
            v += tmp
            np.multiply(v, 1 / c2, out=tmp)
            np.sqrt(tmp, out=tmp)
            tmp += self.eps
            np.divide(m, tmp, out=tmp)
            tmp *= lr / c1
            params[n] -= tmp


def _batches(perm, batch_size):
    chunks = [perm[s : s + batch_size] for s in range(0, len(perm), batch_size)]
    if len(chunks) > 1 and len(chunks[-1]) < 2:
        chunks[-2] = np.concatenate([chunks[-2], chunks.pop()])
    return chunks


def train(
    model: ModelParams,
    data,
    config: TrainConfig = TrainConfig(),
    callback: Optional[Callable[[int, ModelParams, float], bool]] = None,
) -> TrainReport:
    """Adam over seeded mini-batch shuffles. Mutates ``model`` in place.

    ``callback(epoch, model, epoch_loss)`` may return True to stop early.
    """
    x = np.asarray(data, dtype=model.dtype)
    if x.ndim != 2 or len(x) < 2:
        raise ConfigError("training needs at least two samples")
    if x.shape[1] != model.spec.input_dim:
        raise ConfigError(f"training vectors must have length {model.spec.input_dim}")
    model.bn_eps = config.bn_eps
    rng = np.random.default_rng(config.seed)
    opt = Adam(model.tensors, model.trainable_names(), config.learning_rate, config.beta1, config.beta2, config.adam_eps)
    report = TrainReport()
    for epoch in range(config.epochs):
        total = 0.0
        lr = config.lr_at(epoch)
        for idx in _batches(rng.permutation(len(x)), config.batch_size):
            try:
                mse, grads = loss_and_gradients(model, x[idx], momentum=config.bn_momentum)
            except NumericFailure as exc:
                raise NumericFailure(f"training diverged at epoch {epoch + 1}: {exc}") from exc
            if not math.isfinite(mse):
                raise NumericFailure(f"training diverged at epoch {epoch + 1}: loss is {mse}")
            opt.step(model.tensors, grads, lr)
            total += mse * len(idx)
        epoch_loss = total / len(x)
        report.loss_curve.append(epoch_loss)
        report.epochs_run = epoch + 1
        if callback is not None and callback(epoch + 1, model, epoch_loss):
            break
    if config.recalibrate_bn:
        recalibrate_batchnorm(model, x)
    report.final_mse = report.loss_curve[-1]
    return report


def recalibrate_batchnorm(model: ModelParams, data):
    """Set the running statistics to the exact statistics of ``data``.

    The moving averages lag behind the weights and carry the sampling noise of
    single batches; one inference pass over the training set removes both.
    The decoder statistics are taken after the encoder has been recalibrated.
    """
    x, _ = _as_batch(data, model.spec.input_dim, "input")
    x = x.astype(model.dtype, copy=False)
    p = model.tensors
    for part in ("enc", "dec"):
        z = _affine_infer(x, p[f"{part}.fc1.weight"], p[f"{part}.fc1.bias"])
        p[f"{part}.bn.running_mean"][...] = z.mean(axis=0)
        # constant features have zero variance; keep the stored value positive
        p[f"{part}.bn.running_var"][...] = np.maximum(z.var(axis=0), np.finfo(model.dtype).tiny)
        if part == "enc":
            x = _block_infer(model, "enc", x)


# accounting


@dataclass(frozen=True)
class ParamCount:
    encoder: int
    decoder: int

    @property
    def total(self) -> int:
        return self.encoder + self.decoder


def count_parameters(spec: LayerSpec) -> ParamCount:
    """Trainable parameters of each half; batch-norm running statistics are not counted."""
    D, H, L = spec.input_dim, spec.hidden, spec.codeword_len
    encoder = (D + 1) * H + 2 * H + (H + 1) * L
    decoder = (L + 1) * H + 2 * H + (H + 1) * D
    return ParamCount(encoder, decoder)


class MultCount(NamedTuple):
    encoder: int
    decoder: int


def count_multiplications(spec: LayerSpec) -> MultCount:
    """Multiplications per sample: FC in*out, batch-norm 2*width, activations free."""
    D, H, L = spec.input_dim, spec.hidden, spec.codeword_len
    return MultCount(D * H + 2 * H + H * L, L * H + 2 * H + H * D)


# gradient check


def _rel_err(a, b, floor=1e-8):
    scale = max(abs(a), abs(b))
    # gradients that vanish analytically (e.g. the bias ahead of batch-norm) only carry rounding noise
    return 0.0 if scale < floor else abs(a - b) / scale


def gradient_check(model: ModelParams, batch, n_probes: int = 200, step: float = 1e-4, seed=0):
    """Central finite differences against the analytic gradient.

    Probes are spread evenly across every trainable tensor. Returns a list of
    (name, index, analytic, numeric, relative_error).
    """
    if model.dtype != np.float64:
        raise ConfigError("gradient checks need float64 parameters")
    rng = np.random.default_rng(seed)
    _, grads = loss_and_gradients(model, batch, momentum=None)
    names = model.trainable_names()
    sizes = [model.tensors[n].size for n in names]
    per = [0] * len(names)
    remaining = min(n_probes, sum(sizes))
    while remaining:
        for i, size in enumerate(sizes):
            if remaining and per[i] < size:
                per[i] += 1
                remaining -= 1
    results = []
    for name, k in zip(names, per):
        t = model.tensors[name]
        for flat in rng.choice(t.size, size=k, replace=False):
            idx = np.unravel_index(flat, t.shape)
            orig = t[idx]
            t[idx] = orig + step
            up, _ = loss_and_gradients(model, batch, momentum=None)
            t[idx] = orig - step
            down, _ = loss_and_gradients(model, batch, momentum=None)
            t[idx] = orig
            numeric = (up - down) / (2 * step)
            analytic = float(grads[name][idx])
            results.append((name, tuple(int(i) for i in idx), analytic, numeric, _rel_err(analytic, numeric)))
    return results
