"""Dual self-supervised deep clustering over the sharing-stop graph.

An autoencoder and a GCN encoder share the passenger features; the GCN
consumes a blend of its own hidden states and the autoencoder latents.
Student-t soft assignments ``Q`` on the autoencoder bottleneck give a
sharpened target ``P`` that supervises both ``Q`` and the GCN softmax
output ``H``.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError, TrainingError
from .numerics import AdamState, SparseMatrix, Tape, adam_step
from .numerics import ad

log = logging.getLogger(__name__)

EPS = 1e-12
ACTIVATIONS = {"relu": ad.relu, "sigmoid": ad.sigmoid, "identity": ad.identity}


@dataclass
class ClusterTrainConfig:
    n_clusters: int = 4
    hidden: tuple = (100, 100, 500, 16)
    alpha: float = 0.5
    dof: int = 1
    theta: tuple = (1.0, 0.5, 0.05)
    lr: float = 0.001
    epochs: int = 100
    pretrain_epochs: int = 30
    pretrain_lr: float = 0.001
    pretrain_batch: int = 256
    kmeans_restarts: int = 10
    output_act: str = "identity"
    seed: int = 0

    def validate(self):
        problems = []
        if self.n_clusters < 1:
            problems.append("n_clusters must be >= 1")
        if not 0.0 <= self.alpha <= 1.0:
            problems.append("alpha must lie in [0, 1]")
        if self.dof < 1:
            problems.append("dof must be >= 1")
        if len(self.theta) != 3 or min(self.theta) < 0:
            problems.append("theta must be three non-negative weights")
        if self.output_act not in ACTIVATIONS:
            problems.append(f"unknown decoder output activation {self.output_act!r}")
        if not self.hidden:
            problems.append("hidden widths must be non-empty")
        if problems:
            raise ConfigError("; ".join(problems))


@dataclass
class AutoencoderModel:
    """Mirrored encoder/decoder. Layer ``l`` computes ``act(Y @ W + b)``."""

    widths: list
    params: dict
    hidden_act: str = "relu"
    bottleneck_act: str = "identity"
    output_act: str = "sigmoid"

    @property
    def depth(self):
        return len(self.widths) - 1

    @classmethod
    def init(cls, widths, rng, **acts):
        params = {}
        for l in range(len(widths) - 1):
            params[f"ae.enc.{l}.W"] = glorot(rng, widths[l], widths[l + 1])
            params[f"ae.enc.{l}.b"] = np.zeros(widths[l + 1])
        rev = list(reversed(widths))
        for l in range(len(rev) - 1):
            params[f"ae.dec.{l}.W"] = glorot(rng, rev[l], rev[l + 1])
            params[f"ae.dec.{l}.b"] = np.zeros(rev[l + 1])
        return cls(list(widths), params, **acts)


@dataclass
class GcnEncoderModel:
    """GCN layers sharing the autoencoder hidden widths; the last layer is K wide with a row softmax."""

    widths: list
    n_clusters: int
    params: dict
    alpha: float = 0.5

    @property
    def depth(self):
        return len(self.widths) - 1

    @classmethod
    def init(cls, ae_widths, n_clusters, rng, alpha=0.5):
        widths = list(ae_widths[:-1]) + [n_clusters]
        params = {}
        for l in range(len(widths) - 1):
            params[f"gcn.{l}.W"] = glorot(rng, widths[l], widths[l + 1])
        return cls(widths, n_clusters, params, alpha)


@dataclass
class ClusterAssignment:
    centers: np.ndarray
    q: np.ndarray
    p: np.ndarray
    h: np.ndarray
    dof: int
    labels: np.ndarray
    nodes: list = field(default_factory=list)


@dataclass
class ClusterModel:
    ae: AutoencoderModel
    gcn: GcnEncoderModel
    centers: np.ndarray
    config: ClusterTrainConfig
    history: list = field(default_factory=list)

    def parameters(self):
        out = dict(self.ae.params)
        out.update(self.gcn.params)
        out["cluster.centers"] = self.centers
        return out

    def manifest(self):
        return {
            "kind": "clustering",
            "widths": self.ae.widths,
            "n_clusters": self.gcn.n_clusters,
            "alpha": self.gcn.alpha,
            "dof": self.config.dof,
            "theta": list(self.config.theta),
            "seed": self.config.seed,
            "activations": [self.ae.hidden_act, self.ae.bottleneck_act, self.ae.output_act],
            "config": {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self.config).items()},
        }


def glorot(rng, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def node_features(graph):
    """Row-wise L2-normalised sharing-stop adjacency (isolated nodes stay zero)."""
    dense = graph.adjacency.todense()
    norms = np.linalg.norm(dense, axis=1, keepdims=True)
    return np.divide(dense, norms, out=np.zeros_like(dense), where=norms > 0)


# -- forward passes (work on arrays or tape variables) ----------------------


def _ae_forward(model, p, x):
    acts = ACTIVATIONS
    latents = []
    y = x
    n = model.depth
    for l in range(n):
        act = acts[model.bottleneck_act if l == n - 1 else model.hidden_act]
        y = act(ad.add(ad.matmul(y, p[f"ae.enc.{l}.W"]), p[f"ae.enc.{l}.b"]))
        latents.append(y)
    z = y
    for l in range(n):
        act = acts[model.output_act if l == n - 1 else model.hidden_act]
        z = act(ad.add(ad.matmul(z, p[f"ae.dec.{l}.W"]), p[f"ae.dec.{l}.b"]))
    return latents, z


def ae_forward(model, x, params=None):
    """Return ``(latents, reconstruction)``; latents are the outputs of every encoder layer."""
    x_shape = x.shape if not isinstance(x, ad.Var) else x.value.shape
    if x_shape[-1] != model.widths[0]:
        raise ShapeError(f"input width {x_shape[-1]} != encoder input width {model.widths[0]}")
    return _ae_forward(model, model.params if params is None else params, x)


def reconstruction_loss(x, x_hat):
    """``||X - X_hat||^2 / (2N)`` with N the row count."""
    n = (x.value if isinstance(x, ad.Var) else np.asarray(x)).shape[0]
    diff = ad.add(x, ad.mul(x_hat, -1.0))
    return ad.mul(ad.sum(ad.square(diff)), 1.0 / (2.0 * n))


def gcn_forward(model, prop, x, ae_latents, params=None):
    """Propagate through the GCN layers, blending in autoencoder latents, ending in a row softmax.

    Layer ``l > 1`` consumes ``alpha * H_{l-1} + (1 - alpha) * Y_{l-1}``; only the
    first ``depth - 1`` latents are used.
    """
    p = model.params if params is None else params
    depth = model.depth
    if len(ae_latents) < depth - 1:
        raise ShapeError(f"expected at least {depth - 1} autoencoder latents, got {len(ae_latents)}")
    for l in range(depth - 1):
        y = ae_latents[l]
        width = (y.value if isinstance(y, ad.Var) else np.asarray(y)).shape[-1]
        if width != model.widths[l + 1]:
            raise ShapeError(f"latent {l} width {width} != GCN width {model.widths[l + 1]}")
    a = model.alpha
    h = x
    for l in range(depth):
        if l > 0:
            h = ad.add(ad.mul(h, a), ad.mul(ae_latents[l - 1], 1.0 - a))
        z = ad.spmm(prop, ad.matmul(h, p[f"gcn.{l}.W"]))
        h = ad.softmax_rows(z) if l == depth - 1 else ad.relu(z)
    return h


def soft_assign(latents, centers_t, dof=1):
    """Student-t similarities to the centres, normalised per row.

    ``centers_t`` is the ``d x K`` transpose of the centre matrix so that the
    whole kernel composes from tape primitives.
    """
    lv = latents.value if isinstance(latents, ad.Var) else np.asarray(latents)
    cv = centers_t.value if isinstance(centers_t, ad.Var) else np.asarray(centers_t)
    if lv.shape[-1] != cv.shape[0]:
        raise ShapeError(f"latent width {lv.shape[-1]} != centre width {cv.shape[0]}")
    if dof < 1:
        raise ConfigError("degrees of freedom must be >= 1")
    d2 = ad.add(
        ad.add(ad.sum(ad.square(latents), axis=1, keepdims=True), ad.sum(ad.square(centers_t), axis=0, keepdims=True)),
        ad.mul(ad.matmul(latents, centers_t), -2.0),
    )
    kernel_log = ad.mul(ad.log(ad.add(ad.mul(d2, 1.0 / dof), 1.0)), -(dof + 1.0) / 2.0)
    return ad.softmax_rows(kernel_log)


def target_distribution(q):
    """Square and frequency-normalise soft assignments, then renormalise rows."""
    q = np.asarray(q, dtype=np.float64)
    freq = q.sum(axis=0)
    w = np.divide(q * q, freq, out=np.zeros_like(q), where=freq > 0)
    return w / w.sum(axis=1, keepdims=True)


def kl_divergence(p, q):
    """Mean over rows of ``sum_j p log(p/q)``; ``p`` is treated as a constant."""
    p = np.asarray(p, dtype=np.float64)
    n = p.shape[0]
    const = float(np.sum(p * np.log(p + EPS)))
    cross = ad.sum(ad.mul(ad.log(ad.add(q, EPS)), p))
    return ad.mul(ad.add(cross, -const), -1.0 / n)


def joint_loss(x, x_hat, p, q, h, config):
    """``theta1 * L_rec + theta2 * KL(P||Q) + theta3 * KL(P||H)`` with P frozen."""
    t1, t2, t3 = config.theta
    return ad.add(
        ad.add(ad.mul(reconstruction_loss(x, x_hat), t1), ad.mul(kl_divergence(p, q), t2)),
        ad.mul(kl_divergence(p, h), t3),
    )


# -- k-means ---------------------------------------------------------------


def _kmeanspp(x, k, rng):
    n = x.shape[0]
    centers = [x[rng.integers(n)]]
    d2 = np.sum((x - centers[0]) ** 2, axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            idx = rng.integers(n)
        else:
            idx = int(np.searchsorted(np.cumsum(d2), rng.random() * total, side="right"))
            idx = min(idx, n - 1)
        centers.append(x[idx])
        d2 = np.minimum(d2, np.sum((x - x[idx]) ** 2, axis=1))
    return np.array(centers)


def _lloyd(x, centers, max_iter=300, tol=1e-10):
    for _ in range(max_iter):
        d2 = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        labels = d2.argmin(axis=1)
        new = centers.copy()
        for j in range(centers.shape[0]):
            members = x[labels == j]
            if len(members):
                new[j] = members.mean(axis=0)
        shift = np.max(np.abs(new - centers))
        centers = new
        if shift <= tol:
            break
    d2 = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    labels = d2.argmin(axis=1)
    inertia = float(d2[np.arange(x.shape[0]), labels].sum())
    return centers, labels, inertia


def kmeans_init(latents, k, seed=0, restarts=10):
    """Lloyd's algorithm from k-means++ seeds; the lowest-inertia restart wins."""
    x = np.asarray(latents, dtype=np.float64)
    if k > x.shape[0]:
        raise ConfigError(f"cannot place {k} centres among {x.shape[0]} points")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(restarts):
        centers, _, inertia = _lloyd(x, _kmeanspp(x, k, rng))
        if best is None or inertia < best[1]:
            best = (centers, inertia)
    return best[0]


# -- training --------------------------------------------------------------


def _check_finite(value, epoch, stage):
    if not np.isfinite(value):
        raise TrainingError(f"{stage} loss became non-finite", epoch=epoch)


def pretrain_autoencoder(ae, x, config, rng):
    state = AdamState()
    n = x.shape[0]
    batch = max(1, min(config.pretrain_batch, n))
    losses = []
    for epoch in range(config.pretrain_epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, batch):
            rows = x[order[start:start + batch]]
            tape = Tape()
            vs = {k: tape.param(v, name=k) for k, v in ae.params.items()}
            _, x_hat = _ae_forward(ae, vs, tape.constant(rows))
            loss = reconstruction_loss(rows, x_hat)
            _check_finite(float(loss.value), epoch, "pretraining")
            grads = tape.backward(loss)
            adam_step(ae.params, grads, state, config.pretrain_lr)
            total += float(loss.value) * rows.shape[0]
        losses.append(total / n)
    return losses


def _forward_all(ae, gcn, prop, x, p, dof):
    latents, x_hat = _ae_forward(ae, p, x)
    q = soft_assign(latents[-1], p["cluster.centers_t"], dof)
    h = gcn_forward(gcn, prop, x, latents, params=p)
    return latents, x_hat, q, h


def train_clustering(graph, x, config, prop=None):
    """Pretrain the autoencoder, seed centres by k-means, then train jointly.

    Returns ``(ClusterModel, ClusterAssignment)``; labels are the argmax of
    the GCN output distribution (lowest index on ties).
    """
    config.validate()
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] != graph.n:
        raise ShapeError(f"feature rows {x.shape[0]} != graph nodes {graph.n}")
    if config.n_clusters > graph.n:
        raise ConfigError(f"n_clusters {config.n_clusters} exceeds node count {graph.n}")
    if prop is None:
        from .graphs import normalize

        prop = normalize(graph.adjacency)
    rng = np.random.default_rng(config.seed)
    widths = [x.shape[1]] + list(config.hidden)
    ae = AutoencoderModel.init(widths, rng, output_act=config.output_act)
    gcn = GcnEncoderModel.init(widths, config.n_clusters, rng, alpha=config.alpha)

    history = [{"stage": "pretrain", "loss": v} for v in pretrain_autoencoder(ae, x, config, rng)]

    latents, _ = _ae_forward(ae, ae.params, x)
    centers = kmeans_init(latents[-1], config.n_clusters, seed=int(rng.integers(2**31)),
                          restarts=config.kmeans_restarts)

    params = dict(ae.params)
    params.update(gcn.params)
    params["cluster.centers_t"] = np.ascontiguousarray(centers.T)
    state = AdamState()
    for epoch in range(config.epochs):
        tape = Tape()
        vs = {k: tape.param(v, name=k) for k, v in params.items()}
        _, x_hat, q, h = _forward_all(ae, gcn, prop, x, vs, config.dof)
        p = target_distribution(q.value)
        loss = joint_loss(x, x_hat, p, q, h, config)
        value = float(loss.value)
        _check_finite(value, epoch, "joint")
        grads = tape.backward(loss)
        adam_step(params, grads, state, config.lr)
        history.append({
            "stage": "joint",
            "loss": value,
            "max_row_error": float(max(np.max(np.abs(m.sum(axis=1) - 1.0)) for m in (q.value, p, h.value))),
        })

    _, _, q, h = _forward_all(ae, gcn, prop, x, params, config.dof)
    q, h = np.asarray(q), np.asarray(h)
    p = target_distribution(q)
    labels = np.argmax(h, axis=1)
    for name in ae.params:
        ae.params[name] = params[name]
    for name in gcn.params:
        gcn.params[name] = params[name]
    centers = np.ascontiguousarray(params["cluster.centers_t"].T)
    model = ClusterModel(ae, gcn, centers, config, history)
    assignment = ClusterAssignment(centers, q, p, h, config.dof, labels, list(graph.nodes))
    return model, assignment


def predict_labels(model, graph, x, prop=None):
    if prop is None:
        from .graphs import normalize

        prop = normalize(graph.adjacency)
    p = model.parameters()
    p["cluster.centers_t"] = np.ascontiguousarray(model.centers.T)
    _, _, _, h = _forward_all(model.ae, model.gcn, prop, np.asarray(x, dtype=np.float64), p, model.config.dof)
    return np.argmax(h, axis=1)


def split_patterns(profile, labels, nodes=None):
    """Group passengers by pattern label; returns a list of sets indexed by label."""
    nodes = sorted(profile.boardings) if nodes is None else list(nodes)
    labels = np.asarray(labels)
    if len(nodes) != labels.size or set(nodes) != set(profile.boardings):
        raise ShapeError("labels must cover exactly the profile's passengers")
    k = int(labels.max()) + 1 if labels.size else 0
    groups = [set() for _ in range(k)]
    for card, lab in zip(nodes, labels.tolist()):
        groups[lab].add(card)
    log.info("pattern sizes: %s", [len(g) for g in groups])
    return groups


def normalized_mutual_info(a, b):
    """NMI with arithmetic-mean normalisation between two labelings."""
    a = np.asarray(a)
    b = np.asarray(b)
    n = a.size
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    table = np.zeros((ai.max() + 1, bi.max() + 1))
    np.add.at(table, (ai, bi), 1)
    pij = table / n
    pi = pij.sum(axis=1)
    pj = pij.sum(axis=0)
    nz = pij > 0
    mi = float(np.sum(pij[nz] * np.log(pij[nz] / np.outer(pi, pj)[nz])))
    hi = -float(np.sum(pi[pi > 0] * np.log(pi[pi > 0])))
    hj = -float(np.sum(pj[pj > 0] * np.log(pj[pj > 0])))
    if hi == 0 and hj == 0:
        return 1.0
    denom = (hi + hj) / 2
    return mi / denom if denom > 0 else 0.0
