"""Joint training of the rotation and codebook from graph features.

The objective is ``L = L_routing + alpha * L_neighborhood``:

* ``L_routing`` is the negative log-likelihood of the teacher's next hop under
  a softmax over negative (soft-quantized) candidate distances;
* ``L_neighborhood`` is a margin triplet loss between soft-quantized anchors,
  positives and negatives.

Gradients are computed by hand (reverse mode) through the Gumbel-softmax
assignment, the soft decode, the rotation and the matrix exponential.
"""

from __future__ import annotations

import csv
import logging
import math
import os
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .dataset import VectorDataset, as_array, sample_training_subset
from .features import DecisionRecord, RoutingTrace, collect_routing_traces, sample_triplets
from .graph import ProximityGraph
from .pq import Codebook, build_lookup, encode, train_codebook
from .rotation import SkewParam, exp_backward, expm_forward, matrix_exponential, skew_from_upper

log = logging.getLogger(__name__)

__all__ = [
    "TrainingError",
    "TrainingDiverged",
    "QuantizerModel",
    "TrainingConfig",
    "AdamState",
    "Batch",
    "init_model",
    "neighborhood_loss",
    "next_hop_probability",
    "routing_loss",
    "joint_loss",
    "loss_and_grad",
    "adam_step",
    "one_cycle_lr",
    "fit",
    "FitResult",
    "save_checkpoint",
    "load_checkpoint",
    "write_loss_log",
]


class TrainingError(RuntimeError):
    """Non-finite values met during optimisation."""


class TrainingDiverged(TrainingError):
    def __init__(self, message, last_good=None, epoch=None):
        super().__init__(message)
        self.last_good = last_good
        self.epoch = epoch


@dataclass
class QuantizerModel:
    skew: SkewParam
    codebook: Codebook
    alpha: float | None = 1.0

    @property
    def dim(self) -> int:
        return self.skew.dim

    @property
    def m(self) -> int:
        return self.codebook.m

    @property
    def k(self) -> int:
        return self.codebook.k

    def rotation(self) -> np.ndarray:
        return matrix_exponential(self.skew)

    def encode(self, x, rotation=None) -> np.ndarray:
        return encode(x, self.rotation() if rotation is None else rotation, self.codebook)

    def lookup(self, q, rotation=None):
        return build_lookup(q, self.rotation() if rotation is None else rotation, self.codebook)


@dataclass
class TrainingConfig:
    m: int = 16
    k: int = 256
    sigma: float = 1.0
    tau: float = 1.0
    tau_final: float | None = None
    assign_tau: float | None = None
    straight_through: bool = False
    lr_max: float = 1e-3
    rotation_lr: float | None = None
    decay: float = 0.2
    epochs: int = 50
    batch_size: int = 256
    triplets_per_step: int = 64
    k_pos: int = 6
    k_neg: int = 20
    n_hops: int = 2
    beam_h: int = 16
    queries_per_epoch: int = 10000
    train_size: int | None = 500_000
    kmeans_iters: int = 20
    alpha_init: float = 1.0
    learn_alpha: bool = True
    use_routing: bool = True
    gumbel: bool = True
    seed: int = 0

    def __post_init__(self):
        if not (self.sigma > 0 and self.tau > 0 and self.lr_max > 0):
            raise ValueError("sigma, tau and lr_max must be positive")
        if self.tau_final is not None and not self.tau_final > 0:
            raise ValueError("tau_final must be positive")
        if self.rotation_lr is not None and not self.rotation_lr > 0:
            raise ValueError("rotation_lr must be positive")
        if self.assign_tau is not None and not self.assign_tau > 0:
            raise ValueError("assign_tau must be positive")
        if self.epochs < 0 or self.batch_size < 1 or self.queries_per_epoch < 1:
            raise ValueError("invalid epoch/batch configuration")


# ---------------------------------------------------------------------------
# Losses on decoded vectors


def neighborhood_loss(anchor, positive, negative, sigma: float) -> float:
    """Triplet hinge ``max(0, sigma + d(a, p) - d(a, n))``, summed over a batch."""
    a = np.atleast_2d(np.asarray(anchor, dtype=np.float64))
    p = np.atleast_2d(np.asarray(positive, dtype=np.float64))
    n = np.atleast_2d(np.asarray(negative, dtype=np.float64))
    d_pos = np.einsum("ij,ij->i", a - p, a - p)
    d_neg = np.einsum("ij,ij->i", a - n, a - n)
    return float(np.maximum(0.0, sigma + d_pos - d_neg).sum())


def joint_loss(l_routing: float, l_neighborhood: float, alpha: float) -> float:
    return l_routing + alpha * l_neighborhood


# ---------------------------------------------------------------------------
# Differentiable soft quantization


def _soft_forward(sub, words, tau, gumbel=None, hard=False):
    # Work chunk-major, (M, B, .), so the contractions are batched matmuls.
    st = sub.transpose(1, 0, 2)
    c_sq = np.einsum("mkd,mkd->mk", words, words)
    logits = st @ words.transpose(0, 2, 1)
    logits *= 2.0
    logits -= c_sq[:, None, :]
    logits -= np.einsum("mbd,mbd->mb", st, st)[:, :, None]
    if gumbel is not None:
        logits += gumbel.transpose(1, 0, 2)
    logits /= tau
    logits -= logits.max(axis=2, keepdims=True)
    weights = np.exp(logits, out=logits)
    weights /= weights.sum(axis=2, keepdims=True)
    if hard:
        # Straight-through: emit the winning codeword, keep the soft weights for backward.
        pick = weights.argmax(axis=2)
        decoded = words[np.arange(len(words))[:, None], pick]
    else:
        decoded = weights @ words
    return decoded.transpose(1, 0, 2), weights


def _soft_backward(grad, sub, words, weights, tau, hard=False):
    """Pull ``grad`` (B, M, d) back to the sub-vectors and the codewords.

    ``weights`` is the chunk-major (M, B, K) output of :func:`_soft_forward`.
    With ``hard`` the direct codeword term goes to the emitted codeword only.
    """
    gt = grad.transpose(1, 0, 2)
    st = sub.transpose(1, 0, 2)
    if hard:
        onehot = np.zeros_like(weights)
        np.put_along_axis(onehot, weights.argmax(axis=2)[:, :, None], 1.0, axis=2)
        d_words = onehot.transpose(0, 2, 1) @ gt
    else:
        d_words = weights.transpose(0, 2, 1) @ gt
    d_w = gt @ words.transpose(0, 2, 1)
    d_w -= np.einsum("mbk,mbk->mb", weights, d_w)[:, :, None]
    d_w *= weights
    d_dist = d_w
    d_dist *= -1.0 / tau
    row = d_dist.sum(axis=2)
    d_sub = 2.0 * st * row[:, :, None] - 2.0 * (d_dist @ words)
    d_words += 2.0 * words * d_dist.sum(axis=1)[:, :, None] - 2.0 * (d_dist.transpose(0, 2, 1) @ st)
    return d_sub.transpose(1, 0, 2), d_words


@dataclass
class Batch:
    """One optimisation step's worth of features.

    ``candidates`` is an (n_decisions, width) vertex-id matrix padded with -1,
    ``chosen`` the teacher column per row and ``query_of`` the row of
    ``queries`` each decision belongs to. ``triplets`` holds (anchor,
    positive, negative) vertex ids.
    """

    queries: np.ndarray
    candidates: np.ndarray
    chosen: np.ndarray
    query_of: np.ndarray
    triplets: np.ndarray

    @classmethod
    def from_traces(cls, traces, triplets=None) -> "Batch":
        width = max([len(s.candidates) for t in traces for s in t.steps] + [1])
        rows, chosen, query_of = [], [], []
        for qi, t in enumerate(traces):
            for s in t.steps:
                row = np.full(width, -1, dtype=np.int64)
                row[: len(s.candidates)] = s.candidates
                rows.append(row)
                chosen.append(s.chosen)
                query_of.append(qi)
        dim = traces[0].query.shape[0] if traces else 0
        queries = np.array([t.query for t in traces], dtype=np.float64).reshape(len(traces), dim)
        if triplets is None:
            triplets = np.zeros((0, 3), dtype=np.int64)
        return cls(
            queries,
            np.array(rows, dtype=np.int64).reshape(len(rows), width),
            np.array(chosen, dtype=np.int64),
            np.array(query_of, dtype=np.int64),
            np.asarray(triplets, dtype=np.int64).reshape(-1, 3),
        )


def _params_of(model: QuantizerModel) -> dict:
    return {
        "upper": model.skew.upper.copy(),
        "words": model.codebook.words.copy(),
        "alpha": np.array([0.0 if model.alpha is None else model.alpha]),
    }


def _model_of(params: dict, dim: int, scale: float = 1.0) -> QuantizerModel:
    return QuantizerModel(
        SkewParam(dim, params["upper"].copy()),
        Codebook(params["words"] * scale),
        float(params["alpha"][0]),
    )


def loss_and_grad(
    params: dict,
    data: np.ndarray,
    batch: Batch,
    sigma: float,
    tau: float,
    rng: np.random.Generator | None = None,
    use_routing: bool = True,
    assign_tau: float | None = None,
    straight_through: bool = False,
) -> tuple[float, dict, dict]:
    """Mean-reduced joint loss and its gradient w.r.t. ``upper``, ``words``, ``alpha``.

    ``L = mean_decisions(-log P(chosen)) + alpha * mean_triplets(hinge)``.
    Gumbel noise is drawn from ``rng`` when given, otherwise disabled.
    ``assign_tau`` is the codeword softmax temperature; it defaults to ``tau``.
    ``straight_through`` decodes to hard codewords in the forward pass while
    differentiating the soft assignment; its gradient is a surrogate.
    """
    a_tau = tau if assign_tau is None else assign_tau
    words = params["words"]
    m, k, sub_dim = words.shape
    dim = m * sub_dim
    alpha = float(params["alpha"][0])
    rot, cache = expm_forward(skew_from_upper(params["upper"], dim))

    cand = batch.candidates
    trip = batch.triplets
    use_routing = use_routing and cand.size > 0
    ids = [trip.reshape(-1)]
    if use_routing:
        ids.append(cand[cand >= 0])
    uniq = np.unique(np.concatenate(ids)) if sum(a.size for a in ids) else np.zeros(0, dtype=np.int64)
    x_u = data[uniq].astype(np.float64)
    y = (x_u @ rot.T).reshape(len(uniq), m, sub_dim)
    noise = None
    if rng is not None and len(uniq):
        # -log of a unit exponential is a standard Gumbel variate.
        noise = rng.standard_exponential((len(uniq), m, k))
        np.log(noise, out=noise)
        noise *= -1.0
    decoded, weights = _soft_forward(y, words, a_tau, noise, straight_through)
    dec = decoded.reshape(len(uniq), dim)
    g_dec = np.zeros_like(dec)
    g_rot = np.zeros((dim, dim))

    l_route = 0.0
    if use_routing:
        mask = cand >= 0
        pos = np.searchsorted(uniq, np.where(mask, cand, uniq[0] if len(uniq) else 0))
        yq = batch.queries.astype(np.float64) @ rot.T
        diff = dec[pos] - yq[batch.query_of][:, None, :]
        dist = np.einsum("nhd,nhd->nh", diff, diff)
        logits = np.where(mask, -dist / tau, -np.inf)
        top = logits.max(axis=1, keepdims=True)
        ex = np.where(mask, np.exp(logits - top), 0.0)
        z = ex.sum(axis=1, keepdims=True)
        rows = np.arange(len(cand))
        logp = logits[rows, batch.chosen] - top[:, 0] - np.log(z[:, 0])
        n_dec = len(cand)
        l_route = float(-logp.sum() / n_dec)
        soft = ex / z
        soft[rows, batch.chosen] -= 1.0
        g_dist = -soft / tau / n_dec
        g_cand = 2.0 * g_dist[:, :, None] * diff
        g_cand[~mask] = 0.0
        np.add.at(g_dec, pos.reshape(-1), g_cand.reshape(-1, dim))
        g_yq = np.zeros_like(yq)
        np.add.at(g_yq, batch.query_of, -g_cand.sum(axis=1))
        g_rot += g_yq.T @ batch.queries.astype(np.float64)

    l_hood = 0.0
    if len(trip):
        tp = np.searchsorted(uniq, trip)
        a, p, n = dec[tp[:, 0]], dec[tp[:, 1]], dec[tp[:, 2]]
        d_pos = np.einsum("ij,ij->i", a - p, a - p)
        d_neg = np.einsum("ij,ij->i", a - n, a - n)
        hinge = sigma + d_pos - d_neg
        active = hinge > 0
        l_hood = float(np.maximum(hinge, 0.0).sum() / len(trip))
        w = alpha / len(trip) * active[:, None]
        np.add.at(g_dec, tp[:, 0], w * 2.0 * (n - p))
        np.add.at(g_dec, tp[:, 1], w * -2.0 * (a - p))
        np.add.at(g_dec, tp[:, 2], w * 2.0 * (a - n))

    total = l_route + alpha * l_hood
    d_sub, d_words = _soft_backward(g_dec.reshape(len(uniq), m, sub_dim), y, words, weights, a_tau,
                                    straight_through)
    g_rot += d_sub.reshape(len(uniq), dim).T @ x_u
    grads = {
        "upper": exp_backward(None, g_rot, cache),
        "words": d_words,
        "alpha": np.array([l_hood]),
    }
    return total, {"routing": l_route, "neighborhood": l_hood}, grads


def next_hop_probability(record: DecisionRecord, query, model: QuantizerModel, tau: float, data,
                         assign_tau: float | None = None) -> float:
    """Probability the soft-quantized routing picks ``record.chosen`` (no Gumbel noise)."""
    return float(next_hop_distribution(record, query, model, tau, data, assign_tau)[record.chosen])


def next_hop_distribution(record: DecisionRecord, query, model: QuantizerModel, tau: float, data,
                          assign_tau: float | None = None) -> np.ndarray:
    data = as_array(data)
    cands = np.asarray(record.candidates, dtype=np.int64)
    if cands.size == 0:
        raise ValueError("decision record has no candidates")
    rot = model.rotation()
    words = model.codebook.words
    y = (data[cands].astype(np.float64) @ rot.T).reshape(len(cands), model.m, -1)
    dec = _soft_forward(y, words, tau if assign_tau is None else assign_tau)[0].reshape(len(cands), -1)
    diff = dec - rot @ np.asarray(query, dtype=np.float64)
    logits = -np.einsum("ij,ij->i", diff, diff) / tau
    logits -= logits.max()
    p = np.exp(logits)
    return p / p.sum()


def routing_loss(traces: list[RoutingTrace], model: QuantizerModel, tau: float, data,
                 assign_tau: float | None = None) -> float:
    """Summed negative log-likelihood of every teacher choice (no Gumbel noise)."""
    if not traces:
        raise ValueError("need at least one trace")
    total = 0.0
    for t in traces:
        for s in t.steps:
            total -= math.log(next_hop_distribution(s, t.query, model, tau, data, assign_tau)[s.chosen])
    return total


# ---------------------------------------------------------------------------
# Optimiser and schedule


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState, lr: float | dict,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> tuple[dict, AdamState]:
    """One bias-corrected Adam update; returns new parameter and state objects.

    ``lr`` is a scalar or a per-parameter mapping.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            bad = int(np.size(g) - np.isfinite(g).sum())
            raise TrainingError(f"non-finite gradient for {name!r} ({bad} entries) at step {state.step + 1}")
    t = state.step + 1
    new_params, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        m = beta1 * state.m.get(name, np.zeros_like(p)) + (1 - beta1) * g
        v = beta2 * state.v.get(name, np.zeros_like(p)) + (1 - beta2) * g * g
        m_hat = m / (1 - beta1**t)
        v_hat = v / (1 - beta2**t)
        rate = lr[name] if isinstance(lr, dict) else lr
        new_params[name] = p - rate * m_hat / (np.sqrt(v_hat) + eps)
        new_m[name], new_v[name] = m, v
    return new_params, AdamState(t, new_m, new_v)


def one_cycle_lr(step: int, total: int, lr_max: float) -> float:
    """Linear warm-up from lr_max/25 to lr_max over 30% of the steps, then
    linear decay towards lr_max/1e4."""
    if not 0 <= step < total:
        raise ValueError(f"step {step} outside [0, {total})")
    start, floor = lr_max / 25.0, lr_max / 1e4
    peak = 0.3 * total
    if step <= peak:
        return start + (lr_max - start) * (step / peak)
    return lr_max + (floor - lr_max) * (step - peak) / (total - peak)


# ---------------------------------------------------------------------------
# Checkpoints: little-endian; ints are uint32, all parameters float32.

_MAGIC = b"RPQM"
_VERSION = 1
_HEAD = struct.Struct("<4sIIIIII")  # magic, version, D, M, K, has_alpha, adam step


def save_checkpoint(path: str | os.PathLike, model: QuantizerModel, state: AdamState | None = None) -> None:
    state = state or AdamState()
    has_alpha = model.alpha is not None
    parts = [_HEAD.pack(_MAGIC, _VERSION, model.dim, model.m, model.k, int(has_alpha), state.step)]
    arrays = [model.skew.upper, model.codebook.words.reshape(-1)]
    if has_alpha:
        arrays.append(np.array([model.alpha]))
    for moments in (state.m, state.v):
        for name, size in (("upper", model.skew.upper.size), ("words", model.codebook.words.size), ("alpha", 1)):
            arrays.append(np.asarray(moments.get(name, np.zeros(size))).reshape(-1))
    parts.extend(np.asarray(a, dtype="<f4").tobytes() for a in arrays)
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(b"".join(parts))
    os.replace(tmp, path)


def load_checkpoint(path: str | os.PathLike) -> tuple[QuantizerModel, AdamState]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEAD.size:
        raise ValueError(f"{path}: truncated checkpoint header")
    magic, version, dim, m, k, has_alpha, step = _HEAD.unpack_from(raw)
    if magic != _MAGIC:
        raise ValueError(f"{path}: not a quantizer checkpoint")
    if version != _VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    if m == 0 or dim % m:
        raise ValueError(f"{path}: M={m} does not divide D={dim}")
    body = np.frombuffer(raw, dtype="<f4", offset=_HEAD.size).astype(np.float64)
    n_up, n_w = dim * (dim - 1) // 2, m * k * (dim // m)
    expected = n_up + n_w + int(has_alpha) + 2 * (n_up + n_w + 1)
    if body.size != expected:
        raise ValueError(f"{path}: expected {expected} floats, found {body.size}")
    pos = 0

    def take(size):
        nonlocal pos
        out = body[pos : pos + size]
        pos += size
        return out

    upper = take(n_up)
    words = take(n_w).reshape(m, k, dim // m)
    alpha = float(take(1)[0]) if has_alpha else None
    moments = []
    for _ in range(2):
        moments.append({"upper": take(n_up), "words": take(n_w).reshape(m, k, dim // m), "alpha": take(1)})
    model = QuantizerModel(SkewParam(dim, upper), Codebook(words), alpha)
    return model, AdamState(step, moments[0], moments[1])


def write_loss_log(path: str | os.PathLike, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["epoch", "l_routing", "l_neighborhood", "alpha", "lr"])
        writer.writeheader()
        for row in rows:
            writer.writerow({key: row[key] for key in writer.fieldnames})


# ---------------------------------------------------------------------------
# Training loop


def init_model(data, m: int, k: int, seed: int = 0, kmeans_iters: int = 20,
               train_size: int | None = None, alpha: float | None = 1.0) -> QuantizerModel:
    """Identity rotation plus a per-chunk k-means codebook: the plain PQ baseline."""
    data = as_array(data)
    dim = data.shape[1]
    if m < 1 or dim % m:
        raise ValueError(f"chunk count M={m} must divide D={dim}")
    ids = sample_training_subset(data, train_size, seed) if train_size else np.arange(len(data))
    chunks = data[ids].astype(np.float64).reshape(len(ids), m, dim // m).transpose(1, 0, 2)
    codebook = train_codebook(chunks, k, kmeans_iters, seed)
    return QuantizerModel(SkewParam.zeros(dim), codebook, alpha)


def _power_of_two_scale(model: QuantizerModel, data: np.ndarray, sample: int = 20000, seed: int = 0) -> float:
    # Unit in which the mean per-chunk quantization error is ~1; a power of
    # two so rescaling the codebook is exact in floating point.
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(data), size=min(sample, len(data)), replace=False)
    x = data[idx].astype(np.float64)
    codes = encode(x, None, model.codebook)
    recon = model.codebook.words[np.arange(model.m), codes.astype(np.intp)].reshape(len(x), -1)
    err = float(np.mean(np.sum((x - recon) ** 2, axis=1))) / model.m
    if not err > 0:
        return 1.0
    return float(2.0 ** round(0.5 * math.log2(err)))


@dataclass
class FitResult:
    model: QuantizerModel
    log: list[dict]
    state: AdamState
    scale: float


def fit(
    data,
    graph: ProximityGraph,
    config: TrainingConfig,
    *,
    checkpoint_path: str | os.PathLike | None = None,
    log_path: str | os.PathLike | None = None,
    init: QuantizerModel | None = None,
) -> FitResult:
    """Train a quantizer on ``data`` indexed by ``graph``.

    Every epoch refreshes routing traces and triplets under the current model,
    then takes a fixed number of Adam steps. The step count per epoch is set
    from the first epoch's decision count and held fixed so the one-cycle
    schedule spans the whole run.
    """
    data = data.data if isinstance(data, VectorDataset) else np.asarray(data, dtype=np.float32)
    if graph.n != len(data):
        raise ValueError("graph and dataset sizes differ")
    cfg = config
    rng = np.random.default_rng(cfg.seed)
    train_ids = sample_training_subset(data, cfg.train_size, cfg.seed) if cfg.train_size else np.arange(len(data))
    if init is None:
        init = init_model(data, cfg.m, cfg.k, cfg.seed, cfg.kmeans_iters, cfg.train_size, cfg.alpha_init)
    else:
        init = replace(init, alpha=cfg.alpha_init)
    state = AdamState()
    if cfg.epochs == 0:
        if checkpoint_path is not None:
            save_checkpoint(checkpoint_path, init, state)
        if log_path is not None:
            write_loss_log(log_path, [])
        return FitResult(init, [], state, 1.0)

    scale = _power_of_two_scale(init, data, seed=cfg.seed)
    xs = data.astype(np.float64) / scale
    params = _params_of(init)
    params["words"] = params["words"] / scale
    dim = data.shape[1]
    rot_ratio = 1.0 if cfg.rotation_lr is None else cfg.rotation_lr / cfg.lr_max
    steps_per_epoch = None
    total_steps = None
    step = 0
    rows: list[dict] = []
    last_good = init
    for epoch in range(1, cfg.epochs + 1):
        rot = matrix_exponential(skew_from_upper(params["upper"], dim))
        words = Codebook(params["words"])
        n_q = min(cfg.queries_per_epoch, len(train_ids))
        qids = np.sort(rng.choice(train_ids, size=n_q, replace=False))
        if cfg.use_routing:
            codes = encode(xs, rot, words)
            traces = collect_routing_traces(graph, xs, rot, words, xs[qids], cfg.beam_h, codes=codes, query_ids=qids,
                                            leave_out=True)
            full = Batch.from_traces(traces)
        else:
            full = Batch(np.zeros((0, dim)), np.zeros((0, 1), dtype=np.int64), np.zeros(0, dtype=np.int64),
                         np.zeros(0, dtype=np.int64), np.zeros((0, 3), dtype=np.int64))
        if steps_per_epoch is None:
            steps_per_epoch = max(1, math.ceil(len(full.candidates) / cfg.batch_size))
            total_steps = steps_per_epoch * cfg.epochs
        triplets = sample_triplets(graph, xs, steps_per_epoch * cfg.triplets_per_step, cfg.n_hops,
                                   cfg.k_pos, cfg.k_neg, rng)
        order = rng.permutation(len(full.candidates))
        chunks = np.array_split(order, steps_per_epoch)
        sums = {"routing": 0.0, "neighborhood": 0.0}
        lr = cfg.lr_max
        for s, chunk in enumerate(chunks):
            q_needed = np.unique(full.query_of[chunk])
            remap = np.searchsorted(q_needed, full.query_of[chunk])
            batch = Batch(
                full.queries[q_needed],
                full.candidates[chunk],
                full.chosen[chunk],
                remap,
                triplets[s * cfg.triplets_per_step : (s + 1) * cfg.triplets_per_step],
            )
            tau = cfg.tau
            if cfg.tau_final is not None and total_steps > 1:
                tau = cfg.tau + (cfg.tau_final - cfg.tau) * step / (total_steps - 1)
            lr = one_cycle_lr(step, total_steps, cfg.lr_max)
            loss, parts, grads = loss_and_grad(
                params, xs, batch, cfg.sigma, tau, rng if cfg.gumbel else None, cfg.use_routing, cfg.assign_tau,
                cfg.straight_through,
            )
            if not math.isfinite(loss):
                raise TrainingDiverged(f"loss became {loss} at epoch {epoch}", last_good, epoch)
            if not cfg.learn_alpha:
                grads["alpha"] = np.zeros(1)
            try:
                rates = {"upper": lr * rot_ratio, "words": lr, "alpha": lr}
                params, state = adam_step(params, grads, state, rates)
            except TrainingError as exc:
                raise TrainingDiverged(str(exc), last_good, epoch) from exc
            sums["routing"] += parts["routing"]
            sums["neighborhood"] += parts["neighborhood"]
            step += 1
        row = {
            "epoch": epoch,
            "l_routing": sums["routing"] / len(chunks),
            "l_neighborhood": sums["neighborhood"] / len(chunks),
            "alpha": float(params["alpha"][0]),
            "lr": lr,
        }
        rows.append(row)
        log.info("epoch %d: routing %.4f neighborhood %.4f alpha %.4f", epoch, row["l_routing"],
                 row["l_neighborhood"], row["alpha"])
        last_good = _model_of(params, dim, scale)
        if checkpoint_path is not None:
            save_checkpoint(checkpoint_path, last_good, state)
        if log_path is not None:
            write_loss_log(log_path, rows)
    return FitResult(last_good, rows, state, scale)
