"""Monotonic fusion cells.

Each feedback type ``k`` owns an inner network mapping ``(o_k, s)`` to a
scalar ``q_inner``. The outer stage bends that value with one coefficient
per type, ``q = q_inner * (1 + a_k * q_inner)``, and the fused score of a
candidate is the sum of its ``K`` cell outputs.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .exceptions import ContractViolation
from .nn import DenseNet, Layer, _act, _act_grad, forward, init_dense


class MfcModel:
    """``K`` inner networks of one shared architecture plus a fixed input scale.

    ``o_scale[k]`` multiplies ``o_k`` before it enters network ``k``; it is a
    constant of the model, never trained. Weights live in stacked arrays of
    shape ``(K, ...)`` so all cells run in one batched pass; each entry of
    ``inner_nets`` is a :class:`DenseNet` whose layers are views into them.
    """

    def __init__(self, inner_nets, o_scale=None):
        nets = list(inner_nets)
        if not nets:
            raise ContractViolation("MfcModel needs at least one inner network")
        d = nets[0].input_dim
        arch = [(l.weight.shape, l.activation) for l in nets[0].layers]
        for k, net in enumerate(nets):
            if net.input_dim != d or net.output_dim != 1:
                raise ContractViolation(
                    f"inner net {k} maps {net.input_dim}->{net.output_dim}, "
                    f"expected {d}->1")
            if [(l.weight.shape, l.activation) for l in net.layers] != arch:
                raise ContractViolation(f"inner net {k} differs in architecture from net 0")
        self.activations = [a for _, a in arch]
        self.weights = [np.stack([n.layers[i].weight for n in nets]) for i in range(len(arch))]
        self.biases = [np.stack([n.layers[i].bias for n in nets]) for i in range(len(arch))]
        self.inner_nets = [
            DenseNet([Layer(self.weights[i][k], self.biases[i][k], self.activations[i])
                      for i in range(len(arch))])
            for k in range(len(nets))]
        self.o_scale = (np.ones(self.K) if o_scale is None
                        else np.asarray(o_scale, dtype=np.float64).copy())
        if self.o_scale.shape != (self.K,):
            raise ContractViolation("o_scale must have one entry per feedback type")

    @property
    def K(self) -> int:
        return len(self.inner_nets)

    @property
    def state_dim(self) -> int:
        return self.inner_nets[0].input_dim - 1

    @classmethod
    def init(cls, K, state_dim, hidden=(32, 16), rng=None, activation="tanh",
             output_activation="sigmoid", o_scale=None):
        rng = np.random.default_rng(rng)
        sizes = [1 + state_dim, *hidden, 1]
        acts = [activation] * len(hidden) + [output_activation]
        return cls([init_dense(sizes, acts, rng) for _ in range(K)], o_scale)

    @classmethod
    def identity(cls, K, state_dim):
        """Hand-wired cells with ``q_inner = o_k`` whatever the state."""
        nets = []
        for _ in range(K):
            w = np.zeros((1, 1 + state_dim))
            w[0, 0] = 1.0
            nets.append(DenseNet([Layer(w, np.zeros(1), "identity")]))
        return cls(nets)

    def params(self):
        """Stacked parameters ``[W0, b0, W1, b1, ...]`` with a leading ``K`` axis."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def param_names(self):
        out = []
        for i in range(len(self.weights)):
            out.extend((f"cells.layers[{i}].weight", f"cells.layers[{i}].bias"))
        return out

    def copy(self) -> "MfcModel":
        return MfcModel([n.copy() for n in self.inner_nets], self.o_scale)

    def to_dict(self) -> dict:
        return {"o_scale": self.o_scale.tolist(),
                "inner_nets": [n.to_dict() for n in self.inner_nets]}

    @classmethod
    def from_dict(cls, d) -> "MfcModel":
        return cls([DenseNet.from_dict(n) for n in d["inner_nets"]], d["o_scale"])


def _cells_forward(model, S, O):
    """All cells on ``B`` requests of ``N`` candidates; returns ``(Q, cache)``.

    The state part of the first layer is computed once per request and
    broadcast over that request's candidates.
    """
    B, N, K = O.shape
    Os = (O * model.o_scale).transpose(2, 0, 1)  # (K, B, N)
    W0, b0 = model.weights[0], model.biases[0]
    z = (Os[..., None] * W0[:, None, None, :, 0]
         + np.einsum("bd,khd->kbh", S, W0[:, :, 1:])[:, :, None, :]
         + b0[:, None, None, :]).reshape(K, B * N, -1)
    pre, post = [z], []
    h = _act(model.activations[0], z)
    post.append(h)
    for i in range(1, len(model.weights)):
        z = h @ model.weights[i].transpose(0, 2, 1) + model.biases[i][:, None, :]
        h = _act(model.activations[i], z)
        pre.append(z)
        post.append(h)
    Q = h[:, :, 0].reshape(K, B, N).transpose(1, 2, 0)
    return np.ascontiguousarray(Q), (S, Os, pre, post)


def _cells_backward(model, cache, dQ):
    """Gradients of ``sum(dQ * Q)`` aligned with :meth:`MfcModel.params`."""
    S, Os, pre, post = cache
    K, B, N = Os.shape
    g = dQ.transpose(2, 0, 1).reshape(K, B * N, 1)
    n_layers = len(model.weights)
    grads = [None] * (2 * n_layers)
    for i in range(n_layers - 1, 0, -1):
        gz = _act_grad(model.activations[i], pre[i], post[i], g)
        grads[2 * i] = gz.transpose(0, 2, 1) @ post[i - 1]
        grads[2 * i + 1] = gz.sum(axis=1)
        g = gz @ model.weights[i]
    gz = _act_grad(model.activations[0], pre[0], post[0], g).reshape(K, B, N, -1)
    dW0 = np.empty_like(model.weights[0])
    dW0[:, :, 0] = np.einsum("kbnh,kbn->kh", gz, Os)
    dW0[:, :, 1:] = np.einsum("kbh,bd->khd", gz.sum(axis=2), S)
    grads[0] = dW0
    grads[1] = gz.sum(axis=(1, 2))
    return grads


@dataclass
class FusionScores:
    z_inner: np.ndarray  # (N,)
    z_full: np.ndarray  # (N,)
    q_inner: np.ndarray  # (N, K)
    q_full: np.ndarray  # (N, K)


def check_predictions(candidates, K=None) -> np.ndarray:
    O = np.asarray(candidates, dtype=np.float64)
    if O.ndim == 1:
        O = O[None, :]
    if O.ndim != 2 or (K is not None and O.shape[1] != K):
        raise ContractViolation(f"predictions must have shape (N, {K}), got {O.shape}")
    if not np.all(np.isfinite(O)) or O.min(initial=0.0) < 0.0 or O.max(initial=0.0) > 1.0:
        raise ContractViolation("predictions must be finite and within [0, 1]")
    return O


def _check_state(model, s):
    s = np.asarray(s, dtype=np.float64)
    if s.shape != (model.state_dim,):
        raise ContractViolation(f"state has shape {s.shape}, expected ({model.state_dim},)")
    return s


def inner_eval(model: MfcModel, k: int, o_k: float, s) -> float:
    if not 0 <= k < model.K:
        raise ContractViolation(f"feedback index {k} outside [0, {model.K})")
    if not (np.isfinite(o_k) and 0.0 <= o_k <= 1.0):
        raise ContractViolation(f"prediction {o_k} outside [0, 1]")
    s = _check_state(model, s)
    x = np.concatenate([[o_k * model.o_scale[k]], s])
    return float(forward(model.inner_nets[k], x)[0])


def inner_outputs(model: MfcModel, S, O) -> np.ndarray:
    """Inner outputs for a batch of requests.

    ``S`` is ``(B, d)`` and ``O`` is ``(B, N, K)``; returns ``(B, N, K)``.
    """
    S = np.asarray(S, dtype=np.float64)
    O = np.asarray(O, dtype=np.float64)
    return _cells_forward(model, S, O)[0]


def outer_eval(q_inner, a):
    """Second-order outer stage, ``q * (1 + a * q)``; broadcasts."""
    q_inner = np.asarray(q_inner, dtype=np.float64)
    return q_inner * (1.0 + np.asarray(a, dtype=np.float64) * q_inner)


def fuse(model: MfcModel, a, s, candidates) -> FusionScores:
    O = check_predictions(candidates, model.K)
    a = np.asarray(a, dtype=np.float64)
    if a.shape != (model.K,):
        raise ContractViolation(f"action has shape {a.shape}, expected ({model.K},)")
    s = _check_state(model, s)
    q_in = inner_outputs(model, s[None, :], O[None])[0]
    q_out = outer_eval(q_in, a)
    return FusionScores(q_in.sum(axis=1), q_out.sum(axis=1), q_in, q_out)


def rank_top_n(scores, n: int) -> list[int]:
    """Indices of the ``n`` largest scores, best first, ties to the lower index."""
    scores = np.asarray(scores, dtype=np.float64)
    if n < 1 or n > scores.size:
        raise ContractViolation(f"cannot take top {n} of {scores.size} scores")
    order = np.argsort(-scores, kind="stable")
    return order[:n].tolist()


@lru_cache(maxsize=32)
def _all_pairs(n):
    i, j = np.triu_indices(n, k=1)
    return i, j


def sample_pairs(B, N, max_pairs=None, rng=None):
    """Unordered candidate pairs per request, shape ``(B, P)`` each.

    All ``N(N-1)/2`` pairs when they fit under ``max_pairs``; otherwise a
    uniform sample without replacement, drawn independently per request.
    """
    i, j = _all_pairs(N)
    total = i.size
    if max_pairs is None or total <= max_pairs:
        return np.broadcast_to(i, (B, total)), np.broadcast_to(j, (B, total))
    if rng is None:
        raise ContractViolation("pair sampling needs an rng")
    pick = np.argsort(rng.random((B, total)), axis=1)[:, :max_pairs]
    return i[pick], j[pick]


def _softplus(x):
    return np.logaddexp(0.0, x)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _pair_terms(Q, O, Zi, Zf, I, J):
    """Per-request hinge and logistic terms with their gradients w.r.t. Q."""
    B = Q.shape[0]
    rows = np.arange(B)[:, None]
    # mono: for o_I < o_J penalize q_I - q_J > 0; orientation flips for o_I > o_J
    sgn = np.sign(O[rows, J] - O[rows, I])  # (B, P, K)
    diff = Q[rows, I] - Q[rows, J]
    viol = sgn * diff
    active = (viol > 0.0) & (sgn != 0.0)
    mono = np.where(active, viol, 0.0).sum(axis=1)  # (B, K)
    g_mono_I = np.where(active, sgn, 0.0)  # d hinge / d q_I ; q_J gets the negative
    # transfer: pairs ordered by the (constant) full score
    t = np.sign(Zf[rows, J] - Zf[rows, I])  # (B, P)
    margin = t * (Zi[rows, J] - Zi[rows, I])
    sel = t != 0.0
    transfer = np.where(sel, _softplus(-margin), 0.0).sum(axis=1)  # (B,)
    w = np.where(sel, -t * _sigmoid(-margin), 0.0)  # d term / d zi_J ; zi_I gets the negative
    return mono, transfer, g_mono_I, w


def inner_loss_batch(model: MfcModel, S, O, Z_full, lam, max_pairs=None, rng=None,
                     need_grads=True, actions=None):
    """Weighted monotonicity + transfer loss averaged over requests.

    ``S``: ``(B, d)`` states, ``O``: ``(B, N, K)`` predictions, ``Z_full``:
    ``(B, N)`` label scores (treated as constants). Passing ``Z_full=None``
    with ``actions`` ``(B, K)`` builds the labels from the current inner
    outputs and the outer stage, detached, in the same forward pass.
    Returns ``(loss, grads, parts)`` where ``grads`` aligns with
    ``model.params()`` and ``parts`` holds the mean per-type monotonicity and
    transfer terms.
    """
    if not 0.0 <= lam <= 1.0:
        raise ContractViolation(f"lambda must lie in [0, 1], got {lam}")
    S = np.asarray(S, dtype=np.float64)
    O = np.asarray(O, dtype=np.float64)
    B, N, K = O.shape
    if N < 2:
        raise ContractViolation("pairwise losses need at least two candidates")
    if K != model.K or S.shape != (B, model.state_dim):
        raise ContractViolation("inconsistent batch shapes for inner loss")
    if Z_full is not None:
        Z_full = np.asarray(Z_full, dtype=np.float64)
        if Z_full.shape != (B, N):
            raise ContractViolation("label scores must have shape (B, N)")
    elif actions is None:
        raise ContractViolation("need either label scores or outer actions")
    Q, cache = _cells_forward(model, S, O)
    Zi = Q.sum(axis=2)
    if Z_full is None:
        Z_full = outer_eval(Q, np.asarray(actions, dtype=np.float64)[:, None, :]).sum(axis=2)
    I, J = sample_pairs(B, N, max_pairs, rng)
    mono, transfer, g_mono_I, w = _pair_terms(Q, O, Zi, Z_full, I, J)
    loss = float((lam * mono.sum(axis=1) + (1.0 - lam) * transfer).mean())
    parts = {"mono": mono.mean(axis=0), "transfer": float(transfer.mean())}
    if not need_grads:
        return loss, None, parts
    rows = np.broadcast_to(np.arange(B)[:, None], I.shape)
    dQ = np.zeros((B, N, K))
    gm = (lam / B) * g_mono_I
    np.add.at(dQ, (rows, I), gm)
    np.add.at(dQ, (rows, J), -gm)
    dZ = np.zeros((B, N))
    wt = ((1.0 - lam) / B) * w
    np.add.at(dZ, (rows, J), wt)
    np.add.at(dZ, (rows, I), -wt)
    dQ += dZ[:, :, None]
    grads = _cells_backward(model, cache, dQ)
    return loss, grads, parts


def mono_loss_inner(model: MfcModel, s, candidates, k: int, max_pairs=None, rng=None) -> float:
    O = check_predictions(candidates, model.K)
    if O.shape[0] < 2:
        raise ContractViolation("monotonicity loss needs at least two candidates")
    s = _check_state(model, s)
    Q = inner_outputs(model, s[None, :], O[None])
    I, J = sample_pairs(1, O.shape[0], max_pairs, rng)
    Zi = Q.sum(axis=2)
    mono, _, _, _ = _pair_terms(Q, O[None], Zi, Zi, I, J)
    return float(mono[0, k])


def transfer_loss(z_inner, z_full) -> float:
    """Pairwise logistic loss ranking ``z_inner`` like the label ``z_full``."""
    zi = np.asarray(z_inner, dtype=np.float64)
    zf = np.asarray(z_full, dtype=np.float64)
    if zi.shape != zf.shape or zi.ndim != 1 or zi.size < 2:
        raise ContractViolation("transfer loss needs two equal-length vectors of length >= 2")
    i, j = _all_pairs(zi.size)
    t = np.sign(zf[j] - zf[i])
    margin = t * (zi[j] - zi[i])
    return float(np.where(t != 0.0, _softplus(-margin), 0.0).sum())


def inner_total_loss(model: MfcModel, s, candidates, z_full, lam, max_pairs=None, rng=None):
    """Single-request inner loss and its gradients w.r.t. every inner network."""
    O = check_predictions(candidates, model.K)
    s = _check_state(model, s)
    loss, grads, _ = inner_loss_batch(model, s[None, :], O[None],
                                      np.asarray(z_full, dtype=np.float64)[None, :],
                                      lam, max_pairs, rng)
    return loss, grads
