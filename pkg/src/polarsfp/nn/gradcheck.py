"""Central finite-difference checks of the hand-written backward passes (run in float64)."""

import numpy as np

FD_STEP = 1e-4
# gradients that vanish exactly (key bias under softmax, conv bias before a norm)
# are compared against this scale instead of their own ~1e-16 norm
GRAD_FLOOR = 1e-5


def rel_error(analytic, numeric):
    """||a - n|| / max(||a||, ||n||, GRAD_FLOOR)."""
    a = np.ravel(analytic)
    n = np.ravel(numeric)
    scale = max(np.linalg.norm(a), np.linalg.norm(n), GRAD_FLOOR)
    return float(np.linalg.norm(a - n) / scale)


def numeric_grad(f, arr, step=FD_STEP, entries=None):
    """Central differences of scalar ``f()`` wrt ``arr`` (perturbed in place).

    ``entries`` restricts the check to a list of flat indices; other entries are 0.
    """
    grad = np.zeros_like(arr)
    flat = arr.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size) if entries is None else entries:
        orig = flat[i]
        flat[i] = orig + step
        fp = f()
        flat[i] = orig - step
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * step)
    return grad


def numeric_vjp(out, r, arr, step=FD_STEP):
    """Central differences of sum(r * out()) wrt ``arr``.

    The outputs are differenced before the projection onto ``r``, which keeps
    roundoff far below that of differencing the summed scalar.
    """
    grad = np.zeros_like(arr)
    flat = arr.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        yp = out()
        flat[i] = orig - step
        ym = out()
        flat[i] = orig
        gflat[i] = np.sum(r * (yp - ym)) / (2 * step)
    return grad


def check_layer(layer, x, rng, train=True, step=FD_STEP):
    """Check the gradient of sum(r * layer(x)) wrt x and every parameter, for a random r.

    Returns {"input": err, param name: err, ...}.
    """
    x = np.array(x, dtype=np.float64)
    layer.astype(np.float64)
    y = layer.forward(x, train)
    r = rng.standard_normal(y.shape)
    out = lambda: layer.forward(x, train).copy()
    for p in layer.params.values():
        p.grad = None
    layer.forward(x, train)
    dx = layer.backward(r)
    analytic = {name: p.grad.copy() for name, p in layer.params.items()}
    errors = {"input": rel_error(dx, numeric_vjp(out, r, x, step))}
    for name, p in layer.params.items():
        errors[name] = rel_error(analytic[name], numeric_vjp(out, r, p.data, step))
    return errors


def _kink_layers(model):
    from polarsfp.nn.layers import MaxPool2, ReLU, Sequential

    out = []

    def walk(layer):
        if isinstance(layer, (ReLU, MaxPool2)):
            out.append(layer)
        for sub in getattr(layer, "layers", []):
            walk(sub)

    for _, mod in model.modules():
        walk(mod)
    return out


def _pattern(layers):
    return [(layer._mask if hasattr(layer, "_mask") else layer._idx).copy() for layer in layers]


def _same(a, b):
    return all(np.array_equal(x, y) for x, y in zip(a, b))


def check_model(model, x, gt, mask, rng, samples_per_tensor=4, step=FD_STEP, max_redraws=20, shrink=(1, 10, 100)):
    """Full-model check under the cosine loss in training mode.

    For each parameter tensor: one random directional derivative plus a few
    sampled entries. The numeric derivative is the Richardson combination
    (4 D(h/2) - D(h)) / 3 of central differences, which removes the h^2 term that
    the curved bottleneck (attention, norms) makes visible at h = 1e-4. A probe
    whose evaluations change any ReLU mask or pooling argmax straddles a kink;
    it is retried with h divided by the ``shrink`` factors, then redrawn.
    Returns {name: worst relative error}.
    """
    from polarsfp.nn.train import cosine_loss_grad

    model.astype(np.float64)
    x = np.asarray(x, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    kinks = _kink_layers(model)

    def loss():
        return cosine_loss_grad(model.forward(x, train=True), gt, mask)[0]

    model.zero_grad()
    pred = model.forward(x, train=True)
    base_pattern = _pattern(kinks)
    _, g = cosine_loss_grad(pred, gt, mask)
    model.backward(g)

    def central(p, base, direction, h):
        vals = []
        for sign in (1, -1):
            p.data = base + sign * h * direction
            vals.append(loss())
            if not _same(_pattern(kinks), base_pattern):
                return None
        return (vals[0] - vals[1]) / (2 * h)

    def probe(p, direction):
        base = p.data.copy()
        try:
            for factor in shrink:
                h = step / factor
                d_h = central(p, base, direction, h)
                d_half = central(p, base, direction, h / 2) if d_h is not None else None
                if d_half is not None:
                    return (4 * d_half - d_h) / 3, True
            return None, False
        finally:
            p.data = base

    errors = {}
    for name, p in model.parameters().items():
        analytic = p.grad.copy()
        worst = 0.0
        candidates = [None] + list(rng.permutation(p.data.size))
        done, tried = 0, 0
        for entry in candidates:
            if done > samples_per_tensor or tried > samples_per_tensor + max_redraws:
                break
            tried += 1
            if entry is None:
                direction = rng.standard_normal(p.data.shape)
                direction /= np.linalg.norm(direction)
            else:
                direction = np.zeros(p.data.shape)
                direction.reshape(-1)[entry] = 1.0
            numeric, ok = probe(p, direction)
            if not ok:
                continue
            worst = max(worst, rel_error(float(np.sum(analytic * direction)), numeric))
            done += 1
        if done == 0:
            raise RuntimeError(f"every finite-difference probe of {name} crossed a kink")
        errors[name] = worst
    return errors
