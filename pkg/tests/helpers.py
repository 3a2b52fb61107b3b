import numpy as np

from xmtf.nn import DenseNet, Layer


def fd_param_grads(f, params, h=1e-3):
    """Central finite differences of scalar ``f()`` w.r.t. arrays in ``params`` (perturbed in place)."""
    out = []
    for p in params:
        g = np.zeros_like(p)
        flat, gflat = p.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            fp = f()
            flat[i] = old - h
            fm = f()
            flat[i] = old
            gflat[i] = (fp - fm) / (2 * h)
        out.append(g)
    return out


def max_rel_err(a, b, floor=1e-6):
    a, b = np.asarray(a), np.asarray(b)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def wired_cell(state_dim, slope=1.0, bias=0.0):
    """Inner cell computing ``slope * o + bias`` regardless of the state."""
    w = np.zeros((1, 1 + state_dim))
    w[0, 0] = slope
    return DenseNet([Layer(w, [bias], "identity")])


def norm_rel_err(grads, refs):
    """Relative error of a whole gradient list against a reference list."""
    g = np.concatenate([np.ravel(x) for x in grads])
    r = np.concatenate([np.ravel(x) for x in refs])
    scale = max(np.linalg.norm(g), np.linalg.norm(r))
    return 0.0 if scale == 0.0 else float(np.linalg.norm(g - r) / scale)


def _jitter_biases(net, rng):
    # zero biases put dead-unit pre-activations exactly on the relu kink
    for layer in net.layers:
        layer.bias += rng.normal(0.0, 0.1, layer.bias.shape)


def gradient_check_suite(n_instances=100, seed=0, h=1e-6):
    """Worst relative error per loss over random small instances.

    Covers the critic TD loss, the deterministic policy objective, the
    monotonicity hinge, the transfer loss and their weighted inner total.
    """
    from xmtf.mfc import MfcModel, inner_loss_batch, outer_eval, inner_outputs
    from xmtf.rl import Batch, actor_gradient, critic_loss, make_actor, make_critic

    rng = np.random.default_rng(seed)
    worst = {"critic": 0.0, "actor": 0.0, "mono": 0.0, "transfer": 0.0, "inner_total": 0.0}
    for _ in range(n_instances):
        d, K, B = int(rng.integers(2, 5)), int(rng.integers(2, 4)), int(rng.integers(2, 5))
        hidden = tuple(int(x) for x in rng.integers(2, 6, size=2))
        actor = make_actor(d, K, hidden, rng)
        critic = make_critic(d, K, hidden, rng)
        t_actor, t_critic = make_actor(d, K, hidden, rng), make_critic(d, K, hidden, rng)
        for net in (actor, critic, t_actor, t_critic):
            _jitter_biases(net, rng)
        batch = Batch(rng.normal(size=(B, d)), rng.uniform(-1, 1, (B, K)), rng.normal(size=B),
                      rng.random((B, 3, K)), rng.normal(size=(B, d)), rng.random(B) < 0.3)
        _, g = critic_loss(critic, t_actor, t_critic, batch, 0.9)
        fd = fd_param_grads(lambda: critic_loss(critic, t_actor, t_critic, batch, 0.9)[0],
                            critic.params(), h)
        worst["critic"] = max(worst["critic"], norm_rel_err(g, fd))
        _, g = actor_gradient(actor, critic, batch.S)
        fd = fd_param_grads(lambda: actor_gradient(actor, critic, batch.S)[0], actor.params(), h)
        worst["actor"] = max(worst["actor"], norm_rel_err(g, fd))

        N = int(rng.integers(2, 6))
        model = MfcModel.init(K, d, hidden, rng)
        for b in model.biases:
            b += rng.normal(0.0, 0.1, b.shape)
        S, O = rng.normal(size=(B, d)), rng.random((B, N, K))
        Zf = outer_eval(inner_outputs(model, S, O), rng.uniform(-1, 1, (B, 1, K))).sum(axis=2)
        for key, lam in (("mono", 1.0), ("transfer", 0.0), ("inner_total", rng.random())):
            _, g, _ = inner_loss_batch(model, S, O, Zf, lam)
            fd = fd_param_grads(lambda: inner_loss_batch(model, S, O, Zf, lam,
                                                         need_grads=False)[0],
                                model.params(), h)
            worst[key] = max(worst[key], norm_rel_err(g, fd))
    return worst
