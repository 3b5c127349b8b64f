"""Central-difference gradient checks shared by the unit and acceptance tests."""
import numpy as np

from localizability.net import (NetworkConfig, backward, dense, dense_backward, dropout_backward,
                                forward, global_max_pool, global_max_pool_backward, init_params,
                                kernel_map, leaky, leaky_backward, bce_loss, sigmoid,
                                sigmoid_bce_backward, sparse_conv, sparse_conv_backward)
from localizability.voxel import SparseVoxelGrid

H = 1e-4
PROBES = 20
# central differences of an O(1) loss carry ~eps/H ~ 1e-12 of round-off, so a
# 1e-4 relative check is only meaningful above this gradient magnitude
RESOLVABLE = 1e-8


def relative_error(a, n):
    if a == 0 and n == 0:
        return 0.0
    return abs(a - n) / max(abs(a), abs(n))


def probe(f, arrays, grads, rng, probes=PROBES, smooth=None, floor=0.0):
    """Relative errors at ``probes`` random entries of the named ``arrays``.

    ``f()`` evaluates the scalar loss from the current contents of ``arrays``.
    ``smooth()``, if given, returns a hashable activation pattern; entries
    whose +h and -h patterns differ straddle a kink and are redrawn, as are
    entries where both the analytic and numeric gradient are below ``floor``.
    """
    names = sorted(arrays)
    errs = []
    tries = 0
    while len(errs) < probes:
        tries += 1
        if tries > 50 * probes:
            raise RuntimeError("could not find enough smooth probe points")
        k = names[rng.integers(len(names))]
        a = arrays[k]
        idx = tuple(int(rng.integers(s)) for s in a.shape)
        v0 = a[idx]
        a[idx] = v0 + H
        fp, sp = f(), smooth() if smooth else None
        a[idx] = v0 - H
        fm, sm = f(), smooth() if smooth else None
        a[idx] = v0
        if smooth and sp != sm:
            continue
        num = (fp - fm) / (2 * H)
        if max(abs(grads[k][idx]), abs(num)) < floor:
            continue
        errs.append(relative_error(grads[k][idx], num))
    return errs


def dense_grid(rng, half=(3, 3, 2), fill=0.7):
    r = [np.arange(-h, h + 1) for h in half]
    c = np.stack(np.meshgrid(*r, indexing="ij"), axis=-1).reshape(-1, 3)
    c = c[rng.random(len(c)) < fill]
    return SparseVoxelGrid(0.2, c, rng.integers(1, 8, (len(c), 1)).astype(float))


# ------------------------------------------------------------ per layer type

def check_sparse_conv(rng):
    g = dense_grid(rng)
    errs = []
    for stride in (1, 2):
        out_c = g.coords if stride == 1 else np.unique(g.coords // stride, axis=0)
        km = kernel_map(g.coords, out_c, stride)
        arr = {"x": rng.normal(0, 1, (len(g), 3)), "w": rng.normal(0, 0.1, (27, 3, 4)),
               "b": rng.normal(0, 0.1, 4)}
        R = rng.normal(size=(len(out_c), 4))

        def f():
            return float(np.sum(R * sparse_conv(arr["x"], arr["w"], arr["b"], km, len(out_c))))

        dx, dw, db = sparse_conv_backward(R, arr["x"], arr["w"], km)
        errs += probe(f, arr, {"x": dx, "w": dw, "b": db}, rng, PROBES // 2)
    return errs


def check_leaky(rng):
    z = rng.normal(0, 1, 200)
    z[np.abs(z) < 1e-3] = 1e-2
    arr = {"z": z}
    R = rng.normal(size=200)
    grads = {"z": leaky_backward(R, z, 0.01)}
    return probe(lambda: float(np.sum(R * leaky(arr["z"], 0.01))), arr, grads, rng,
                 smooth=lambda: tuple(arr["z"] > 0))


def check_max_pool(rng):
    arr = {"x": rng.normal(0, 1, (30, 8))}
    R = rng.normal(size=8)
    _, arg = global_max_pool(arr["x"])
    grads = {"x": global_max_pool_backward(R, arg, 30)}
    return probe(lambda: float(R @ global_max_pool(arr["x"])[0]), arr, grads, rng,
                 smooth=lambda: tuple(global_max_pool(arr["x"])[1]))


def check_dense(rng):
    arr = {"h": rng.normal(size=16), "w": rng.normal(0, 0.1, (16, 8)), "b": rng.normal(0, 0.1, 8)}
    R = rng.normal(size=8)
    dh, dw, db = dense_backward(R, arr["h"], arr["w"])
    return probe(lambda: float(R @ dense(arr["h"], arr["w"], arr["b"])), arr,
                 {"h": dh, "w": dw, "b": db}, rng)


def check_dropout(rng):
    mask = (rng.random(64) < 0.7) / 0.7
    arr = {"h": rng.normal(size=64)}
    R = rng.normal(size=64)
    return probe(lambda: float(R @ (arr["h"] * mask)), arr, {"h": dropout_backward(R, mask)}, rng)


def check_sigmoid_bce(rng):
    arr = {"z": rng.normal(0, 3, 6)}
    t = rng.integers(0, 2, 6)
    return probe(lambda: bce_loss(sigmoid(arr["z"]), t), arr,
                 {"z": sigmoid_bce_backward(arr["z"], t)}, rng)


LAYER_CHECKS = {"sparse_conv": check_sparse_conv, "leaky_relu": check_leaky,
                "global_max_pool": check_max_pool, "dense": check_dense,
                "dropout": check_dropout, "sigmoid_bce": check_sigmoid_bce}


# ------------------------------------------------------------ composed net

def check_network(rng, cfg=NetworkConfig(), batch_size=2):
    params = {k: rng.normal(0, 0.1, v.shape) for k, v in init_params(cfg).items()}
    batch = [(dense_grid(rng), rng.integers(0, 2, 6)) for _ in range(batch_size)]
    seed = int(rng.integers(1 << 30))
    _, grads = backward(params, batch, cfg, np.random.default_rng(seed))

    def f():
        return backward(params, batch, cfg, np.random.default_rng(seed))[0]

    def pattern():
        r = np.random.default_rng(seed)
        out = []
        for grid, _ in batch:
            _, tape = forward(params, grid, cfg, True, r)
            for L in tape.levels:
                out += [L["z0"] > 0, L["z1"] > 0, L["s"] > 0]
            out.append(tape.pool_arg)
            out += [rec["z"] > 0 for rec in tape.mlp]
        return b"".join(np.ascontiguousarray(a).tobytes() for a in out)

    return probe(f, params, grads, rng, smooth=pattern, floor=RESOLVABLE)
