"""Independent reference implementations used only by the tests.

Each oracle is written the slow, obvious way and shares no code with the
package beyond plain data types.
"""
import itertools

import numpy as np
import scipy.sparse


def group_norms_loop(w, gm, gn):
    """Squared norm per (block row, column), by explicit element loops."""
    m, c = w.shape
    rows = -(-m // gm)
    out = np.zeros((rows, c))
    for r in range(m):
        for col in range(c):
            out[r // gm, col] += float(w[r, col]) ** 2
    return out


def alpha_scalar(norm2, eps):
    return 1.0 / (norm2 + eps)


def topk_groups(norms, k):
    """Kept (band, column) pairs: largest norm first, then lower column, then lower band."""
    cells = [(-norms[b, c], c, b) for b in range(norms.shape[0]) for c in range(norms.shape[1])]
    cells.sort()
    return {(b, c) for _, c, b in cells[:k]}


def brute_force_topk(norms, k):
    """All k-subsets of groups with the largest total squared norm; tiny layers only."""
    cells = [(b, c) for b in range(norms.shape[0]) for c in range(norms.shape[1])]
    totals = {subset: sum(norms[b, c] for b, c in sorted(subset)) for subset in itertools.combinations(cells, k)}
    best = max(totals.values())
    return best, [set(s) for s, t in totals.items() if t == best]


def naive_conv(x, w, stride=1, padding=0):
    """Seven nested loops over (batch, out ch, oy, ox, in ch, ky, kx)."""
    b, n, h, wd = x.shape
    m, _, kh, kw = w.shape
    xp = np.zeros((b, n, h + 2 * padding, wd + 2 * padding))
    xp[:, :, padding : padding + h, padding : padding + wd] = x
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((b, m, ho, wo))
    for bi in range(b):
        for mi in range(m):
            for oy in range(ho):
                for ox in range(wo):
                    s = 0.0
                    for ni in range(n):
                        for ky in range(kh):
                            for kx in range(kw):
                                s += w[mi, ni, ky, kx] * xp[bi, ni, oy * stride + ky, ox * stride + kx]
                    out[bi, mi, oy, ox] = s
    return out


def csr_index_bytes(dense):
    """Index bytes of scipy's CSR with 32-bit indices and row pointers."""
    mat = scipy.sparse.csr_matrix(np.asarray(dense, dtype=np.float64))
    mat.indices = mat.indices.astype(np.int32)
    mat.indptr = mat.indptr.astype(np.int32)
    return mat.indices.nbytes + mat.indptr.nbytes


def conv_options(t_g, t_c, tau):
    """Both allowed executions of a two-branch conv structure, branch 1 = heavier on G."""
    heavy = 0 if t_g[0] >= t_g[1] else 1
    light = 1 - heavy
    lanes_par = ["G", "G"]
    lanes_par[light] = "C"
    return [
        (tuple(lanes_par), max(t_g[heavy], t_c[light] + tau[light])),
        (("G", "G"), t_g[0] + t_g[1]),
    ]


def nonconv_options(t_g, t_c):
    out = []
    for lanes in itertools.product("CG", repeat=len(t_g)):
        cpu = sum(c for lane, c in zip(lanes, t_c) if lane == "C")
        gpu = sum(g for lane, g in zip(lanes, t_g) if lane == "G")
        out.append((lanes, max(cpu, gpu)))
    return out


def nonconv_best(t_g, t_c):
    """Minimum makespan; ties to fewer G branches, then lexicographic lane tuple."""
    opts = nonconv_options(t_g, t_c)
    return min(opts, key=lambda o: (o[1], o[0].count("G"), o[0]))


def central_difference(f, x, h=1e-6):
    """Gradient of scalar f at array x by central differences, element by element."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-30)
    return float(np.linalg.norm(a - b) / denom)
