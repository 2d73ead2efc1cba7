"""Image-space guidance: one gradient contract, three interchangeable backends.

Every backend maps ``(image, prompt, condition, rng)`` to a gradient with the
image's shape.  The training loop chains that gradient through the
renderer's reverse pass and never looks at which backend produced it.

* :class:`PhotometricBackend` pulls the render towards a reference image.
* :class:`MockScoreBackend` emulates a noise predictor with a known error
  (a constant bias image, optionally plus a pull towards a target) so the
  score-distillation estimator can be checked statistically.
* :class:`ExternalStubBackend` serialises requests for a network-served
  denoiser; see the wire format below.

Wire format of the external backend
-----------------------------------
Request (little endian)::

    b"SDSQ" | u32 version | u64 request id | u32 timestep
    | u32 n | prompt utf-8 (n bytes)
    | u32 n | image PNG (n bytes)
    | u32 n | condition PNG (n bytes, n = 0 when absent)

Response::

    b"SDSG" | u32 width | u32 height | u32 channels | float32[height, width, channels]
"""

import io
import itertools
import logging
import struct
from abc import ABC, abstractmethod
from dataclasses import dataclass

import numpy as np

from ._validation import check_same_shape
from .errors import ConfigError, GuidanceError

log = logging.getLogger(__name__)

PHOTOMETRIC = "photometric"
MOCK_SCORE = "mock_score"
EXTERNAL_STUB = "external_stub"
BODY_WEIGHTS = (1.0, 0.01, 0.05)
BODY_GRADIENT_SCALE = 0.1
CLOTHING_GRADIENT_SCALE = 0.07
REQUEST_MAGIC = b"SDSQ"
RESPONSE_MAGIC = b"SDSG"
WIRE_VERSION = 1


@dataclass
class GuidancePrompt:
    """Prompt token plus optional (H, W) or (H, W, C) condition image."""

    token: str
    condition: np.ndarray = None

    def __post_init__(self):
        if not isinstance(self.token, str) or not self.token.strip():
            raise ConfigError("prompt token must be a nonempty string")
        if self.condition is not None:
            self.condition = np.asarray(self.condition, dtype=np.float64)

    def check_resolution(self, height, width):
        if self.condition is not None and self.condition.shape[:2] != (height, width):
            raise ConfigError(f"condition image is {self.condition.shape[:2]}, render is {(height, width)}")


class NoiseSchedule:
    """Discrete DDPM-style schedule with linear betas.

    Timesteps are drawn uniformly from ``[t_min, t_max]``; ``weight(t)`` is a
    constant 1 unless another positive function is supplied.
    """

    def __init__(self, num_steps=1000, beta_start=1e-4, beta_end=0.02, t_range=(0.02, 0.98), weight=None):
        if num_steps < 2:
            raise ConfigError("schedule needs at least two steps")
        self.num_steps = int(num_steps)
        betas = np.linspace(beta_start, beta_end, self.num_steps)
        self.alphas_cumprod = np.cumprod(1.0 - betas)
        self.t_min = int(round(t_range[0] * self.num_steps))
        self.t_max = int(round(t_range[1] * self.num_steps))
        if not 0 <= self.t_min <= self.t_max < self.num_steps:
            raise ConfigError("invalid timestep range")
        self._weight = weight

    def weight(self, t):
        w = 1.0 if self._weight is None else float(self._weight(t))
        if not w > 0:
            raise ConfigError("timestep weight must be positive")
        return w

    def mean_weight(self):
        ts = np.arange(self.t_min, self.t_max + 1)
        return float(np.mean([self.weight(t) for t in ts]))

    def coefficients(self, t):
        """``(sqrt(abar_t), sqrt(1 - abar_t))``."""
        abar = self.alphas_cumprod[t]
        return np.sqrt(abar), np.sqrt(1.0 - abar)

    def sample_t(self, rng):
        return int(rng.integers(self.t_min, self.t_max + 1))

    def add_noise(self, x, noise, t):
        a, s = self.coefficients(t)
        return a * x + s * noise


class GuidanceBackend(ABC):
    kind = None

    @abstractmethod
    def gradient(self, image, prompt, condition=None, rng=None, **context):
        """Image-space gradient, same shape as ``image``."""

    def loss_value(self, image, grad, **context):
        """Scalar logged for this guidance term."""
        return 0.5 * float(np.sum(grad * grad))


class PhotometricBackend(GuidanceBackend):
    """Gradient of ``sum((x - x_ref)**2)``; the reference arrives per call."""

    kind = PHOTOMETRIC

    def gradient(self, image, prompt, condition=None, rng=None, *, reference=None, **context):
        if reference is None:
            raise GuidanceError("photometric guidance needs a reference image")
        image, reference = check_same_shape(image, reference, ("image", "reference"))
        return 2.0 * (image - reference)

    def loss_value(self, image, grad, *, reference=None, **context):
        return photometric_loss(image, reference)


class _ScoreBackend(GuidanceBackend):
    """Shared score-distillation estimator ``w(t) (eps_pred - eps)``."""

    def __init__(self, schedule=None):
        self.schedule = NoiseSchedule() if schedule is None else schedule

    @abstractmethod
    def predict_noise(self, noisy, t, prompt, condition, *, image, noise, rng):
        """Predicted noise for ``noisy`` at step ``t``."""

    def gradient(self, image, prompt, condition=None, rng=None, **context):
        rng = np.random.default_rng() if rng is None else rng
        t = self.schedule.sample_t(rng)
        noise = rng.standard_normal(np.shape(image))
        noisy = self.schedule.add_noise(image, noise, t)
        pred = self.predict_noise(noisy, t, prompt, condition, image=image, noise=noise, rng=rng)
        return self.schedule.weight(t) * (pred - noise)


class MockScoreBackend(_ScoreBackend):
    """Noise predictor with a controlled error: ``eps + bias + gain (x - target)``.

    With ``bias=0`` and no target it is a perfect denoiser and the residual is
    exactly zero.
    """

    kind = MOCK_SCORE

    def __init__(self, bias=0.0, target=None, gain=1.0, schedule=None):
        super().__init__(schedule)
        self.bias = bias
        self.target = None if target is None else np.asarray(target, dtype=np.float64)
        self.gain = gain

    def predict_noise(self, noisy, t, prompt, condition, *, image, noise, rng):
        pred = noise + self.bias
        if self.target is not None:
            pred = pred + self.gain * (image - self.target)
        return pred


def _png_bytes(image):
    from PIL import Image

    arr = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    arr = np.round(arr * 255.0).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(arr).save(buf, format="PNG")
    return buf.getvalue()


def _chunk(payload):
    return struct.pack("<I", len(payload)) + payload


def encode_request(image, prompt, t, condition=None, request_id=0):
    token = prompt.token if isinstance(prompt, GuidancePrompt) else str(prompt)
    cond = b"" if condition is None else _png_bytes(condition)
    return (REQUEST_MAGIC + struct.pack("<IQI", WIRE_VERSION, request_id, t)
            + _chunk(token.encode("utf-8")) + _chunk(_png_bytes(image)) + _chunk(cond))


def decode_request(payload):
    """Inverse of :func:`encode_request` (image and condition stay PNG bytes)."""
    if payload[:4] != REQUEST_MAGIC:
        raise GuidanceError("not a guidance request")
    version, request_id, t = struct.unpack_from("<IQI", payload, 4)
    pos = 20
    fields = []
    for _ in range(3):
        (n,) = struct.unpack_from("<I", payload, pos)
        fields.append(payload[pos + 4:pos + 4 + n])
        pos += 4 + n
    return {"version": version, "request_id": request_id, "t": t,
            "prompt": fields[0].decode("utf-8"), "image_png": fields[1], "condition_png": fields[2] or None}


def encode_response(grad):
    grad = np.asarray(grad, dtype=np.float32)
    if grad.ndim == 2:
        grad = grad[..., None]
    h, w, c = grad.shape
    return RESPONSE_MAGIC + struct.pack("<III", w, h, c) + grad.astype("<f4").tobytes()


def decode_response(payload):
    if len(payload) < 16 or payload[:4] != RESPONSE_MAGIC:
        raise GuidanceError("malformed guidance response header")
    w, h, c = struct.unpack_from("<III", payload, 4)
    body = payload[16:]
    if len(body) != 4 * w * h * c:
        raise GuidanceError("guidance response size does not match its header")
    return np.frombuffer(body, dtype="<f4").reshape(h, w, c).astype(np.float64)


class ExternalStubBackend(_ScoreBackend):
    """Forwards noisy renders to ``transport(request_bytes) -> response_bytes``.

    The response carries the predicted noise.  Requests carry an id, so a
    transport may answer them in any order as long as each call returns its
    own response.  Without a transport every call fails with a retryable
    :class:`GuidanceError`.
    """

    kind = EXTERNAL_STUB

    def __init__(self, transport=None, schedule=None, options=None):
        super().__init__(schedule)
        self.transport = transport
        self.options = dict(options or {})
        self._ids = itertools.count()

    def predict_noise(self, noisy, t, prompt, condition, *, image, noise, rng):
        if self.transport is None:
            raise GuidanceError("no external guidance endpoint configured")
        request = encode_request(np.clip(noisy, 0.0, 1.0), prompt, t, condition, next(self._ids))
        try:
            response = self.transport(request)
        except Exception as exc:
            raise GuidanceError(f"guidance transport failed: {exc}") from exc
        pred = decode_response(response)
        if pred.shape != np.shape(image):
            pred = pred.reshape(np.shape(image))
        return pred


def make_backend(kind, **kwargs):
    backends = {PHOTOMETRIC: PhotometricBackend, MOCK_SCORE: MockScoreBackend,
                EXTERNAL_STUB: ExternalStubBackend}
    if kind not in backends:
        raise ConfigError(f"unknown guidance backend {kind!r}")
    return backends[kind](**kwargs)


def sds_image_gradient(backend, image, prompt, condition=None, rng=None, *, scale=1.0, **context):
    """Scaled image-space guidance gradient.

    Raises :class:`GuidanceError` when the backend fails or returns a gradient
    of the wrong shape or with non-finite entries; the caller skips the step.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.size and (image.min() < -1e-9 or image.max() > 1.0 + 1e-9):
        raise ConfigError("guidance images must lie in [0, 1]")
    if isinstance(prompt, GuidancePrompt):
        condition = prompt.condition if condition is None else condition
    grad = backend.gradient(image, prompt, condition, rng, **context)
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != image.shape:
        raise GuidanceError(f"backend returned shape {grad.shape} for image {image.shape}")
    if not np.all(np.isfinite(grad)):
        raise GuidanceError("backend returned non-finite gradient")
    return scale * grad


def photometric_loss(image, reference):
    """Mean squared error over all entries."""
    image, reference = check_same_shape(image, reference, ("image", "reference"))
    return float(np.mean((image - reference) ** 2))


def rasterize_skeleton_condition(joints, bones, camera, resolution=None, line_width=1.5):
    """White-on-black anti-aliased line drawing of the projected bones.

    Bones with an endpoint at or behind the camera plane are skipped with a
    warning.
    """
    from .proxy import _rescaled_camera

    camera = _rescaled_camera(camera, resolution)
    joints = np.asarray(joints, dtype=np.float64).reshape(-1, 3)
    if not np.all(np.isfinite(joints)):
        raise ConfigError("joint positions must be finite")
    W, H = camera.width, camera.height
    image = np.zeros((H, W))
    bones = [tuple(b) for b in bones]
    if not bones:
        return image
    if any(not (0 <= i < len(joints) and 0 <= j < len(joints)) for i, j in bones):
        raise ConfigError("bone references a missing joint")
    pc = camera.world_to_camera(joints)
    rows, cols = np.meshgrid(np.arange(H) + 0.5, np.arange(W) + 0.5, indexing="ij")
    pix = np.stack([cols, rows], axis=-1)
    half = 0.5 * line_width
    for i, j in bones:
        if pc[i, 2] <= 1e-6 or pc[j, 2] <= 1e-6:
            log.warning("bone (%d, %d) has a joint behind the camera; skipped", i, j)
            continue
        a = camera.focal * pc[i, :2] / pc[i, 2] + np.array([0.5 * W, 0.5 * H])
        b = camera.focal * pc[j, :2] / pc[j, 2] + np.array([0.5 * W, 0.5 * H])
        ab = b - a
        s = np.clip(((pix - a) @ ab) / max(ab @ ab, 1e-12), 0.0, 1.0)
        d = np.linalg.norm(pix - (a + s[..., None] * ab), axis=-1)
        image = np.maximum(image, np.clip(half + 0.5 - d, 0.0, 1.0))
    return image


def body_stage_loss(sds, normal, normal_reg, weights=BODY_WEIGHTS):
    """Weighted body-stage objective."""
    ls, ln, lr = weights
    return ls * sds + ln * normal + lr * normal_reg


class BodyStep:
    """Body-stage terms on one render made with ``spatial=True``.

    ``gradient`` returns the parameter gradient of the weighted objective
    given the guidance gradient on the rendered colours.
    """

    def __init__(self, render, weights=BODY_WEIGHTS):
        from .render import normal_terms

        self.render = render
        self.weights = weights
        self.terms = normal_terms(render, weights[1], weights[2])

    def loss(self, sds_value):
        return body_stage_loss(sds_value, self.terms.normal, self.terms.normal_reg, self.weights)

    def gradient(self, d_color):
        cot = self.terms.cotangents
        d_color = None if d_color is None else self.weights[0] * d_color
        return self.render.backward(d_color=d_color, d_weights=cot["d_weights"],
                                    d_normal=cot["d_normal"], d_grad_sigma=cot["d_grad_sigma"])
