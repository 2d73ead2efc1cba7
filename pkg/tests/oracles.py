"""Independent scalar reference implementations used as test oracles.

Everything here is written with plain Python loops and ``math`` so it shares
no code path with the vectorised package internals.
"""

import math


def encode_scalar(x, num_bands, include_input=True):
    out = list(x) if include_input else []
    for b in range(num_bands):
        f = (2.0 ** b) * math.pi
        out.extend(math.sin(f * xi) for xi in x)
        out.extend(math.cos(f * xi) for xi in x)
    return out


def composite_scalar(sigmas, deltas, colors):
    """Emission-absorption sum along one ray: (rgb, opacity, weights)."""
    weights = []
    for i in range(len(sigmas)):
        trans = 1.0
        for j in range(i):
            trans *= math.exp(-sigmas[j] * deltas[j])
        weights.append(trans * (1.0 - math.exp(-sigmas[i] * deltas[i])))
    rgb = [sum(w * c[k] for w, c in zip(weights, colors)) for k in range(3)]
    return rgb, sum(weights), weights


def sh_basis_scalar(n):
    """Real second-order SH basis with constants derived from their definitions."""
    x, y, z = n
    c0 = 0.5 * math.sqrt(1.0 / math.pi)
    c1 = math.sqrt(3.0 / (4.0 * math.pi))
    c2 = 0.5 * math.sqrt(15.0 / math.pi)
    c3 = 0.25 * math.sqrt(5.0 / math.pi)
    c4 = 0.25 * math.sqrt(15.0 / math.pi)
    return [c0, c1 * y, c1 * z, c1 * x, c2 * x * y, c2 * y * z, c3 * (3 * z * z - 1), c2 * x * z,
            c4 * (x * x - y * y)]


def shade_scalar(albedo, n, coeffs):
    basis = sh_basis_scalar(n)
    out = []
    for c in range(3):
        irr = sum(basis[k] * coeffs[k][c] for k in range(9))
        out.append(min(1.0, max(0.0, albedo[c] * irr)))
    return out


def adam_scalar(theta, grads_seq, lr, b1=0.9, b2=0.99, eps=1e-8):
    m = v = 0.0
    for t, g in enumerate(grads_seq, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mh = m / (1 - b1 ** t)
        vh = v / (1 - b2 ** t)
        theta -= lr * mh / (math.sqrt(vh) + eps)
    return theta


def huber_scalar(r, delta=1.0):
    a = abs(r)
    return 0.5 * r * r if a <= delta else delta * (a - 0.5 * delta)


def norm_scalar(values):
    return math.sqrt(sum(v * v for v in values))
