from lwta_meta import autodiff as ad
from lwta_meta.objective import elbo_nodes


def elbo_grad_check(net, x, y, task_type, frozen_rng, h=1e-4):
    """Max relative error between the ELBO's analytic parameter gradients and
    central finite differences, with all sampling noise frozen by replaying
    the same stream. Network parameters must be f64.
    """
    arrays = net.param_arrays()

    def value():
        b, _, _ = elbo_nodes(net, x, y, frozen_rng.replay(), task_type, ad.Tape())
        return b.total

    tape = ad.Tape()
    _, total, bindings = elbo_nodes(net, x, y, frozen_rng.replay(), task_type, tape)
    ad.backward(total)
    grads = {id(arr): node.grad.copy() for arr, node in bindings}

    max_rel = 0.0
    for arr in arrays:
        flat = arr.reshape(-1)
        gflat = grads[id(arr)].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = value()
            flat[i] = orig - h
            fm = value()
            flat[i] = orig
            numeric = (fp - fm) / (2 * h)
            rel = abs(gflat[i] - numeric) / max(1.0, abs(numeric))
            max_rel = max(max_rel, rel)
    return max_rel
