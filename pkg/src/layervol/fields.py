"""Differentiable density/colour/normal fields, one per scene layer.

Every field exposes the same duck-typed surface so renderers can mix learned
and analytic layers:

``params`` / ``n_params``
    flat float64 parameter vector (empty for analytic fields).
``forward(x, spatial=False) -> (FieldOutput, cache)``
    evaluate at points ``x`` of shape (n, 3); with ``spatial=True`` the
    output also carries d(sigma)/dx.
``backward(cache, d_sigma=None, d_rgb=None, d_normal=None, d_grad_sigma=None)``
    vector-Jacobian product onto ``params``.
"""

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from ._validation import check_points
from .errors import ConfigError, ParameterCorruptionError

NORMAL_FLOOR = 1e-8
BODY = "body"
CLOTHING = "clothing"


@dataclass
class FieldOutput:
    sigma: np.ndarray
    rgb: np.ndarray
    normal: np.ndarray
    grad_sigma: np.ndarray = None


class FrequencyEncoding:
    """Sine/cosine positional encoding.

    Features are laid out as ``[x, sin(pi x), cos(pi x), sin(2 pi x), ...]``,
    one block of ``input_dim`` entries per term, octave ``b`` using frequency
    ``2**b * pi``.
    """

    def __init__(self, num_bands=6, include_input=True, input_dim=3):
        if int(num_bands) < 1:
            raise ConfigError("num_bands must be a positive integer")
        self.num_bands = int(num_bands)
        self.include_input = bool(include_input)
        self.input_dim = int(input_dim)

    @property
    def out_dim(self):
        return self.input_dim * (2 * self.num_bands + int(self.include_input))

    @property
    def frequencies(self):
        return np.pi * 2.0 ** np.arange(self.num_bands)

    def __call__(self, x):
        x = np.asarray(x, dtype=np.float64)
        scaled = x[:, None, :] * self.frequencies[None, :, None]  # (n, bands, d)
        blocks = np.stack([np.sin(scaled), np.cos(scaled)], axis=2)  # (n, bands, 2, d)
        feats = blocks.reshape(x.shape[0], -1)
        if self.include_input:
            feats = np.concatenate([x, feats], axis=1)
        return feats

    def jacobian(self, x):
        """Tangent of the features along each input axis, shape (d, n, out_dim)."""
        x = np.asarray(x, dtype=np.float64)
        n, d = x.shape
        freqs = self.frequencies
        scaled = x[:, None, :] * freqs[None, :, None]
        dsin = np.cos(scaled) * freqs[None, :, None]
        dcos = -np.sin(scaled) * freqs[None, :, None]
        eye = np.eye(d)
        # entry (k, i, b, s, j) is nonzero only for j == k
        blocks = np.stack([dsin, dcos], axis=2)  # (n, bands, 2, d)
        tangent = blocks[None] * eye[:, None, None, None, :]
        tangent = tangent.reshape(d, n, -1)
        if self.include_input:
            ident = np.broadcast_to(eye[:, None, :], (d, n, d))
            tangent = np.concatenate([ident, tangent], axis=2)
        return tangent


class MLP:
    """Fully connected tanh network over a flat parameter vector.

    ``forward`` optionally pushes tangents (shape (k, n, d_in)) through the
    network; ``backward`` then accepts cotangents for both the outputs and the
    output tangents, which is what second-order losses such as the surface
    normal terms need.
    """

    def __init__(self, widths):
        widths = [int(w) for w in widths]
        if len(widths) < 2 or min(widths) < 1:
            raise ConfigError(f"invalid MLP widths {widths}")
        self.widths = widths
        self.shapes = list(zip(widths[:-1], widths[1:]))
        self.size = sum(i * o + o for i, o in self.shapes)

    def unpack(self, params):
        layers, pos = [], 0
        for n_in, n_out in self.shapes:
            W = params[pos:pos + n_in * n_out].reshape(n_in, n_out)
            pos += n_in * n_out
            b = params[pos:pos + n_out]
            pos += n_out
            layers.append((W, b))
        return layers

    def init_params(self, rng, zero_last=False):
        params = np.zeros(self.size)
        for (W, _), (n_in, n_out) in zip(self.unpack(params), self.shapes):
            limit = np.sqrt(6.0 / (n_in + n_out))
            W[...] = rng.uniform(-limit, limit, size=(n_in, n_out))
        if zero_last:
            W, b = self.unpack(params)[-1]
            W[...] = 0.0
            b[...] = 0.0
        return params

    def forward(self, params, h, h_dot=None):
        layers = self.unpack(params)
        last = len(layers) - 1
        inputs, input_dots, slopes, z_dots = [], [], [], []
        a, a_dot = h, h_dot
        for l, (W, b) in enumerate(layers):
            inputs.append(a)
            input_dots.append(a_dot)
            z = a @ W + b
            z_dot = None if a_dot is None else a_dot @ W
            if l < last:
                a = np.tanh(z)
                s = 1.0 - a * a
                slopes.append(s)
                z_dots.append(z_dot)
                a_dot = None if z_dot is None else s * z_dot
            else:
                a, a_dot = z, z_dot
        cache = (inputs, input_dots, slopes, z_dots)
        return a, a_dot, cache

    def backward(self, params, cache, d_out, d_out_dot=None):
        inputs, input_dots, slopes, z_dots = cache
        if d_out_dot is not None and input_dots[0] is None:
            raise ValueError("tangent cotangent given but forward ran without tangents")
        layers = self.unpack(params)
        grad = np.zeros(self.size)
        grad_layers = self.unpack(grad)
        z_bar, zdot_bar = d_out, d_out_dot
        for l in range(len(layers) - 1, -1, -1):
            W, _ = layers[l]
            gW, gb = grad_layers[l]
            a_prev = inputs[l]
            gW += a_prev.T @ z_bar
            gb += z_bar.sum(axis=0)
            if zdot_bar is not None:
                n_in, n_out = W.shape
                gW += input_dots[l].reshape(-1, n_in).T @ zdot_bar.reshape(-1, n_out)
            if l == 0:
                break
            a_bar = z_bar @ W.T
            s = slopes[l - 1]
            z_bar = a_bar * s
            if zdot_bar is not None:
                adot_bar = zdot_bar @ W.T
                s_bar = np.einsum("knd,knd->nd", adot_bar, z_dots[l - 1])
                z_bar = z_bar - 2.0 * a_prev * s * s_bar
                zdot_bar = s * adot_bar
        return grad


class LayerField:
    """Learned field: tanh MLP over frequency-encoded positions.

    Seven network outputs feed three heads: density ``softplus(gain * o0)``,
    colour ``sigmoid(o1:4)`` and a predicted normal ``normalize(o4:7)``.
    """

    n_outputs = 7

    def __init__(self, hidden=(64, 64, 64), num_bands=6, include_input=True,
                 role=BODY, layer_index=0, density_gain=1.0, seed=0, params=None,
                 zero_density_head=False):
        if role not in (BODY, CLOTHING):
            raise ConfigError(f"unknown layer role {role!r}")
        if role == CLOTHING and layer_index < 1:
            raise ConfigError("clothing layers are indexed from 1")
        self.hidden = tuple(int(h) for h in hidden)
        self.encoder = FrequencyEncoding(num_bands, include_input)
        self.role = role
        self.layer_index = 0 if role == BODY else int(layer_index)
        self.density_gain = float(density_gain)
        self.mlp = MLP([self.encoder.out_dim, *self.hidden, self.n_outputs])
        if params is None:
            params = self.mlp.init_params(np.random.default_rng(seed))
            if zero_density_head:
                W, b = self.mlp.unpack(params)[-1]
                W[:, 0] = 0.0
                b[0] = 0.0
        params = np.array(params, dtype=np.float64)
        if params.shape != (self.mlp.size,):
            raise ConfigError(f"expected {self.mlp.size} parameters, got {params.shape}")
        self.params = params

    @property
    def n_params(self):
        return self.params.size

    def descriptor(self):
        return {
            "kind": "layer_field",
            "hidden": list(self.hidden),
            "num_bands": self.encoder.num_bands,
            "include_input": self.encoder.include_input,
            "activation": "tanh",
            "density_gain": self.density_gain,
        }

    @classmethod
    def from_descriptor(cls, desc, params, role=BODY, layer_index=0):
        if desc.get("kind") != "layer_field":
            raise ConfigError(f"descriptor is not a layer field: {desc.get('kind')!r}")
        return cls(hidden=desc["hidden"], num_bands=desc["num_bands"],
                   include_input=desc["include_input"], role=role,
                   layer_index=layer_index, density_gain=desc["density_gain"],
                   params=params)

    def copy(self):
        return LayerField.from_descriptor(self.descriptor(), self.params.copy(),
                                          self.role, self.layer_index)

    def forward(self, x, spatial=False):
        if not np.all(np.isfinite(self.params)):
            raise ParameterCorruptionError(f"non-finite parameters in {self.role} layer")
        x = np.asarray(x, dtype=np.float64)
        h = self.encoder(x)
        h_dot = self.encoder.jacobian(x) if spatial else None
        o, o_dot, mlp_cache = self.mlp.forward(self.params, h, h_dot)

        raw = self.density_gain * o[:, 0]
        sigma = np.logaddexp(0.0, raw)
        dsigma_draw = expit(raw)
        rgb = expit(o[:, 1:4])
        v = o[:, 4:7]
        norm = np.maximum(np.linalg.norm(v, axis=1), NORMAL_FLOOR)
        normal = v / norm[:, None]
        grad_sigma = None
        if spatial:
            grad_sigma = (self.density_gain * dsigma_draw)[:, None] * o_dot[:, :, 0].T
        out = FieldOutput(sigma, rgb, normal, grad_sigma)
        cache = (mlp_cache, o_dot, dsigma_draw, norm, out)
        return out, cache

    def backward(self, cache, d_sigma=None, d_rgb=None, d_normal=None, d_grad_sigma=None):
        mlp_cache, o_dot, dsigma_draw, norm, out = cache
        n = out.sigma.shape[0]
        d_o = np.zeros((n, self.n_outputs))
        d_raw = np.zeros(n) if d_sigma is None else d_sigma * dsigma_draw
        d_o_dot = None
        if d_grad_sigma is not None:
            if o_dot is None:
                raise ValueError("d_grad_sigma requires a forward pass with spatial=True")
            g = self.density_gain
            d_o_dot = np.zeros_like(o_dot)
            d_o_dot[:, :, 0] = (g * dsigma_draw)[None, :] * d_grad_sigma.T
            d_slope = g * np.einsum("nk,kn->n", d_grad_sigma, o_dot[:, :, 0])
            d_raw = d_raw + d_slope * dsigma_draw * (1.0 - dsigma_draw)
        d_o[:, 0] = self.density_gain * d_raw
        if d_rgb is not None:
            d_o[:, 1:4] = d_rgb * out.rgb * (1.0 - out.rgb)
        if d_normal is not None:
            nrm = out.normal
            radial = np.sum(nrm * d_normal, axis=1, keepdims=True)
            d_v = (d_normal - nrm * radial) / norm[:, None]
            floored = norm <= NORMAL_FLOOR
            d_v[floored] = d_normal[floored] / NORMAL_FLOOR
            d_o[:, 4:7] = d_v
        return self.mlp.backward(self.params, mlp_cache, d_o, d_o_dot)

    def query(self, x):
        out, _ = self.forward(check_points(x))
        return out.sigma, out.rgb, out.normal

    def query_with_param_grad(self, x, d_sigma=None, d_rgb=None, d_normal=None):
        out, cache = self.forward(check_points(x))
        return self.backward(cache, d_sigma, d_rgb, d_normal)

    def density_spatial_grad(self, x):
        out, _ = self.forward(check_points(x), spatial=True)
        return out.grad_sigma


class AnalyticField:
    """Parameter-free field built from closed-form callables.

    ``density(x) -> (n,)``, ``density_grad(x) -> (n, 3)`` and
    ``albedo(x) -> (n, 3)``.  The predicted-normal head defaults to the
    analytic surface normal ``-grad/|grad|`` (``+z`` where the gradient
    vanishes).
    """

    params = np.zeros(0)
    n_params = 0

    def __init__(self, density, density_grad, albedo, role=BODY, layer_index=0,
                 normal=None, name="analytic"):
        self.density = density
        self.density_grad = density_grad
        self.albedo = albedo
        self.normal = normal
        self.role = role
        self.layer_index = 0 if role == BODY else int(layer_index)
        self.name = name

    @classmethod
    def constant(cls, sigma, rgb=(0.5, 0.5, 0.5), **kwargs):
        rgb = np.asarray(rgb, dtype=np.float64)
        return cls(lambda x: np.full(len(x), float(sigma)),
                   lambda x: np.zeros((len(x), 3)),
                   lambda x: np.tile(rgb, (len(x), 1)), name="constant", **kwargs)

    def forward(self, x, spatial=False):
        x = np.asarray(x, dtype=np.float64)
        sigma = np.asarray(self.density(x), dtype=np.float64)
        rgb = np.asarray(self.albedo(x), dtype=np.float64)
        grad = self.density_grad(x) if (spatial or self.normal is None) else None
        if self.normal is not None:
            normal = np.asarray(self.normal(x), dtype=np.float64)
        else:
            normal = np.zeros((len(x), 3))
            normal[:, 2] = 1.0
            mag = np.linalg.norm(grad, axis=1)
            ok = mag > NORMAL_FLOOR
            normal[ok] = -grad[ok] / mag[ok, None]
        out = FieldOutput(sigma, rgb, normal, grad if spatial else None)
        return out, None

    def backward(self, cache, d_sigma=None, d_rgb=None, d_normal=None, d_grad_sigma=None):
        return np.zeros(0)

    def query(self, x):
        out, _ = self.forward(check_points(x))
        return out.sigma, out.rgb, out.normal

    def query_with_param_grad(self, x, d_sigma=None, d_rgb=None, d_normal=None):
        return np.zeros(0)

    def density_spatial_grad(self, x):
        return np.asarray(self.density_grad(check_points(x)), dtype=np.float64)
