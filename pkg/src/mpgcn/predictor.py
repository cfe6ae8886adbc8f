"""GCN2Flow next-step flow forecaster and the multi-pattern ensemble.

Tensors are stop-major: a batch of windows has shape ``(N, B, t, C)`` with
``N`` stops, ``B`` windows, ``t`` time steps and ``C`` channels. Graph
propagation runs over axis 0 and temporal convolution over axis -2.
"""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .errors import ConfigError, ContractError, ShapeError, TrainingError
from .numerics import AdamState, Tape, adam_step
from .numerics import ad

log = logging.getLogger(__name__)

# block order of the sandwich: [TC, SGC, TC] x 2, TC
LAYOUT = ("tc", "sgc", "tc", "tc", "sgc", "tc", "tc")


@dataclass
class PredictorConfig:
    window: int = 12
    kernel: int = 3
    channels: int = 32
    bias: str = "per_stop"  # or "shared"
    lr: float = 0.001
    epochs: int = 100
    batch_size: int = 64
    test_days: int = 2
    val_days: int = 2
    select_best: bool = True
    seed: int = 0

    def validate(self):
        problems = []
        if self.kernel < 1:
            problems.append("kernel must be >= 1")
        n_tc = LAYOUT.count("tc")
        if self.window < n_tc * (self.kernel - 1) + 1:
            problems.append(f"window {self.window} too short for {n_tc} valid convolutions of size {self.kernel}")
        if self.bias not in ("per_stop", "shared"):
            problems.append("bias must be 'per_stop' or 'shared'")
        if self.channels < 1 or self.batch_size < 1 or self.epochs < 0:
            problems.append("channels and batch_size must be positive, epochs non-negative")
        if self.test_days < 0 or self.val_days < 0:
            problems.append("split day counts must be non-negative")
        if problems:
            raise ConfigError("; ".join(problems))


@dataclass
class Gcn2FlowModel:
    params: dict
    config: PredictorConfig
    mean: np.ndarray
    std: np.ndarray
    stops: list = field(default_factory=list)
    history: list = field(default_factory=list)

    @property
    def n_stops(self):
        return self.mean.size

    def manifest(self):
        return {
            "kind": "gcn2flow",
            "config": asdict(self.config),
            "stops": list(self.stops),
            "layout": list(LAYOUT),
        }

    def parameters(self):
        out = dict(self.params)
        out["norm.mean"] = self.mean
        out["norm.std"] = self.std
        return out

    @classmethod
    def from_checkpoint(cls, manifest, params):
        params = dict(params)
        mean, std = params.pop("norm.mean"), params.pop("norm.std")
        return cls(params, PredictorConfig(**manifest["config"]), mean, std, manifest.get("stops", []))


# -- normalisation and windows ---------------------------------------------


def zscore_fit_apply(values, fit_rows):
    """Per-stop z-score fitted on ``values[fit_rows]``; zero std becomes 1."""
    values = np.asarray(values, dtype=np.float64)
    fit = values[fit_rows]
    if fit.shape[0] == 0:
        raise ContractError("z-score fit range is empty")
    mean = fit.mean(axis=0)
    std = fit.std(axis=0)
    std = np.where(std > 0, std, 1.0)
    return (values - mean) / std, mean, std


def unnormalize(values, mean, std):
    return np.asarray(values) * std + mean


def split_days(n_days, config):
    """Day indices for (train, validation, test); test is the last block."""
    test = list(range(max(n_days - config.test_days, 0), n_days))
    val_start = max(n_days - config.test_days - config.val_days, 0)
    val = list(range(val_start, n_days - len(test)))
    train = list(range(0, val_start))
    if not train:
        raise ContractError(f"{n_days} days leave no training days after the validation/test split")
    return train, val, test


def make_windows(values, slots_per_day, days, window):
    """Stride-1 windows inside each day; returns ``(X (N, W, t, 1), Y (N, W), target_rows)``."""
    values = np.asarray(values, dtype=np.float64)
    xs, ys, rows = [], [], []
    for d in days:
        base = d * slots_per_day
        for s in range(window, slots_per_day):
            rows.append(base + s)
    rows = np.asarray(rows, dtype=np.int64)
    if rows.size == 0:
        n = values.shape[1]
        return np.zeros((n, 0, window, 1)), np.zeros((n, 0)), rows
    idx = rows[:, None] - window + np.arange(window)[None, :]
    xs = values[idx]  # (W, t, N)
    x = np.ascontiguousarray(xs.transpose(2, 0, 1))[..., None]
    y = np.ascontiguousarray(values[rows].T)
    return x, y, rows


# -- blocks ----------------------------------------------------------------


def _bias(b, ndim):
    bv = b.value if isinstance(b, ad.Var) else np.asarray(b)
    if bv.ndim == 1:
        return b
    return ad.reshape(b, (bv.shape[0],) + (1,) * (ndim - 2) + (bv.shape[1],))


def tc_forward(params, x, prefix=""):
    """Gated temporal convolution: ``relu((conv0) * sigmoid(conv1) + conv2)``.

    ``params`` holds ``W0..W2`` of shape ``(k, C_in, C_out)`` and biases
    ``b0..b2`` of shape ``(N, C_out)`` (per stop) or ``(C_out,)`` (shared).
    ``x`` has the stop axis first and time on axis -2.
    """
    ndim = (x.value if isinstance(x, ad.Var) else np.asarray(x)).ndim
    # the three branches share one im2col pass via a stacked kernel
    w = ad.concat_rows([params[f"{prefix}W{j}"] for j in range(3)], axis=-1)
    b = ad.concat_rows([params[f"{prefix}b{j}"] for j in range(3)], axis=-1)
    conv = ad.add(ad.conv1d_time(x, w), _bias(b, ndim))
    c = (w.value if isinstance(w, ad.Var) else w).shape[-1] // 3
    branch = [ad.slice_rows(conv, j * c, (j + 1) * c, axis=-1) for j in range(3)]
    return ad.relu(ad.add(ad.mul(branch[0], ad.sigmoid(branch[1])), branch[2]))


def sgc_forward(weight, prop, x):
    """Propagate across stops then mix channels; the activation is left to the caller."""
    n = (x.value if isinstance(x, ad.Var) else np.asarray(x)).shape[0]
    if prop.rows != n or prop.cols != n:
        raise ShapeError(f"propagation is {prop.rows}x{prop.cols} but input has {n} stops")
    return ad.matmul(ad.spmm(prop, x), weight)


def gcn2flow_forward(params, prop, x, config):
    """Full sandwich on ``x`` of shape ``(N, B, t, 1)``; returns ``(N, B)`` normalised predictions."""
    xv = x.value if isinstance(x, ad.Var) else np.asarray(x)
    if xv.ndim != 4:
        raise ShapeError(f"expected (stops, batch, time, channels) input, got {xv.shape}")
    n_tc = LAYOUT.count("tc")
    remaining = xv.shape[2] - n_tc * (config.kernel - 1)
    if remaining < 1:
        raise ShapeError(f"time extent {xv.shape[2]} leaves {remaining} steps after {n_tc} convolutions")
    h = x
    tc = sgc = 0
    for kind in LAYOUT:
        if kind == "tc":
            h = tc_forward(params, h, prefix=f"tc{tc}.")
            tc += 1
        else:
            h = ad.relu(sgc_forward(params[f"sgc{sgc}.W"], prop, h))
            sgc += 1
    n, b = xv.shape[0], xv.shape[1]
    flat = ad.reshape(h, (n, b, remaining * config.channels))
    out = ad.add(ad.matmul(flat, params["fc.W"]), params["fc.b"])
    return ad.reshape(out, (n, b))


def init_params(n_stops, config, rng):
    k, c = config.kernel, config.channels
    params = {}
    c_in = 1
    tc = sgc = 0
    for kind in LAYOUT:
        if kind == "tc":
            limit = np.sqrt(6.0 / (k * c_in + k * c))
            bias_shape = (n_stops, c) if config.bias == "per_stop" else (c,)
            for j in range(3):
                params[f"tc{tc}.W{j}"] = rng.uniform(-limit, limit, size=(k, c_in, c))
                params[f"tc{tc}.b{j}"] = np.zeros(bias_shape)
            tc += 1
        else:
            limit = np.sqrt(6.0 / (c_in + c))
            params[f"sgc{sgc}.W"] = rng.uniform(-limit, limit, size=(c_in, c))
            sgc += 1
        c_in = c
    remaining = config.window - LAYOUT.count("tc") * (k - 1)
    fan = remaining * c
    limit = np.sqrt(6.0 / (fan + 1))
    params["fc.W"] = rng.uniform(-limit, limit, size=(fan, 1))
    params["fc.b"] = np.zeros(1)
    return params


def mse_loss(pred, target):
    diff = ad.add(pred, ad.mul(target, -1.0))
    return ad.mean(ad.square(diff))


# -- training and prediction -----------------------------------------------


def _evaluate(params, prop, x, y, config, chunk=256):
    if x.shape[1] == 0:
        return float("nan")
    total = 0.0
    for s in range(0, x.shape[1], chunk):
        pred = gcn2flow_forward(params, prop, x[:, s:s + chunk], config)
        total += float(np.sum((pred - y[:, s:s + chunk]) ** 2))
    return total / y.size


def train_gcn2flow(flow, prop, config, stream=0):
    """Fit one GCN2Flow model on ``flow`` (a FlowTensor).

    Training minimises the mean squared error of normalised next-step flow
    over windows drawn from the training days. With ``select_best`` the
    weights from the epoch with the lowest validation error are kept.
    """
    config.validate()
    rng = np.random.default_rng([config.seed, stream])
    n_days = len(flow.days)
    spd = flow.slots_per_day
    train_days, val_days, _ = split_days(n_days, config)
    fit_rows = np.concatenate([np.arange(d * spd, (d + 1) * spd) for d in train_days])
    norm, mean, std = zscore_fit_apply(flow.values, fit_rows)
    x, y, _ = make_windows(norm, spd, train_days, config.window)
    if x.shape[1] == 0:
        raise ContractError("not enough time steps for a single training window")
    xv, yv, _ = make_windows(norm, spd, val_days, config.window)
    params = init_params(flow.values.shape[1], config, rng)
    state = AdamState()
    history = []
    best = (np.inf, None)
    n_win = x.shape[1]
    for epoch in range(config.epochs):
        order = rng.permutation(n_win)
        total = 0.0
        for s in range(0, n_win, config.batch_size):
            idx = order[s:s + config.batch_size]
            tape = Tape()
            vs = {k: tape.param(v, name=k) for k, v in params.items()}
            loss = mse_loss(gcn2flow_forward(vs, prop, x[:, idx], config), y[:, idx])
            value = float(loss.value)
            if not np.isfinite(value):
                raise TrainingError("GCN2Flow loss became non-finite", epoch=epoch)
            grads = tape.backward(loss)
            adam_step(params, grads, state, config.lr)
            total += value * idx.size
        val = _evaluate(params, prop, xv, yv, config)
        history.append({"epoch": epoch, "train_mse": total / n_win, "val_mse": val})
        if config.select_best and np.isfinite(val) and val < best[0]:
            best = (val, {k: v.copy() for k, v in params.items()})
    if config.select_best and best[1] is not None:
        params = best[1]
    return Gcn2FlowModel(params, config, mean, std, list(flow.stops), history)


def predict(model, prop, values, slots_per_day, days=None, chunk=256):
    """Unnormalised next-step predictions for every windowed slot of ``days``.

    Returns ``(pred (W, N), target_rows)`` where ``target_rows`` index the
    time axis of ``values``.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.shape[1] != model.n_stops:
        raise ShapeError(f"values have {values.shape[1]} stops, model expects {model.n_stops}")
    n_days = values.shape[0] // slots_per_day
    days = range(n_days) if days is None else days
    norm = (values - model.mean) / model.std
    x, _, rows = make_windows(norm, slots_per_day, days, model.config.window)
    outs = [gcn2flow_forward(model.params, prop, x[:, s:s + chunk], model.config) for s in range(0, x.shape[1], chunk)]
    pred = np.concatenate(outs, axis=1) if outs else np.zeros((model.n_stops, 0))
    return unnormalize(pred.T, model.mean, model.std), rows


@dataclass
class MpgcnResult:
    total: np.ndarray
    per_pattern: list
    rows: np.ndarray
    models: list
    split: np.ndarray


def _train_and_predict(args):
    flow, prop, config, stream = args
    model = train_gcn2flow(flow, prop, config, stream=stream)
    pred, rows = predict(model, prop, flow.values, flow.slots_per_day)
    return model, pred, rows


def fuse(predictions):
    """Left-to-right element-wise sum of per-pattern predictions."""
    total = np.array(predictions[0], dtype=np.float64, copy=True)
    for p in predictions[1:]:
        total += p
    return total


def mpgcn_predict(per_pattern_flows, prop, config, jobs=1):
    """Train one model per pattern and sum their unnormalised predictions.

    Pattern ``j`` trains with random stream ``j``, so a single pattern
    reproduces plain :func:`train_gcn2flow` exactly.
    """
    if not per_pattern_flows:
        raise ContractError("at least one pattern flow is required")
    ref = per_pattern_flows[0]
    for j, f in enumerate(per_pattern_flows[1:], start=1):
        if f.values.shape != ref.values.shape or f.days != ref.days or f.stops != ref.stops \
                or f.step_minutes != ref.step_minutes:
            raise ContractError(f"pattern {j} flow is not aligned with pattern 0")
    tasks = [(f, prop, config, j) for j, f in enumerate(per_pattern_flows)]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=min(jobs, len(tasks))) as pool:
            results = list(pool.map(_train_and_predict, tasks))
    else:
        results = [_train_and_predict(t) for t in tasks]
    models = [r[0] for r in results]
    preds = [r[1] for r in results]
    rows = results[0][2]
    train_days, val_days, test_days = split_days(len(ref.days), config)
    day_of = rows // ref.slots_per_day
    split = np.where(np.isin(day_of, test_days), "test", np.where(np.isin(day_of, val_days), "val", "train"))
    return MpgcnResult(fuse(preds), preds, rows, models, split)


def with_seed(config, seed):
    return replace(config, seed=seed)
