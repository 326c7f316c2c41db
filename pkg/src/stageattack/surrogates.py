"""Surrogate encoder ensemble behind the attack objective.

The objective is the ensemble-averaged cosine between the image embedding
of a crop and the text embedding of the target description. Members that
want a fixed input resolution get the crop bilinearly resized; gradients
flow back through the resize (its adjoint) onto the crop canvas, so the
caller always receives a gradient shaped like the crop it passed in.

Real encoders attach through the same member interface out of process;
everything here ships with analytic stubs whose losses and gradients have
closed forms, which is what the test suite exercises.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from .errors import (
    EncoderUnavailable,
    NonDifferentiableMember,
    ShapeMismatch,
    UnknownKind,
)
from .seeding import content_digest

UNIT_NORM_TOLERANCE = 1e-5


# --- bilinear resize as an explicit linear operator ---------------------

_INTERP_CACHE: dict[tuple[int, int], np.ndarray] = {}


def _interp_matrix(n_out: int, n_in: int) -> np.ndarray:
    """Row-stochastic 1-d bilinear interpolation matrix (pixel centers)."""
    key = (n_out, n_in)
    if key not in _INTERP_CACHE:
        m = np.zeros((n_out, n_in))
        for i in range(n_out):
            src = (i + 0.5) * n_in / n_out - 0.5
            lo = int(np.floor(src))
            frac = src - lo
            i0 = min(max(lo, 0), n_in - 1)
            i1 = min(max(lo + 1, 0), n_in - 1)
            m[i, i0] += 1.0 - frac
            m[i, i1] += frac
        m.setflags(write=False)
        _INTERP_CACHE[key] = m
    return _INTERP_CACHE[key]


def bilinear_resize(image: np.ndarray, out_hw: tuple[int, int]) -> np.ndarray:
    """Resize H x W x C to out_hw, separable bilinear, edges replicated."""
    h, w = image.shape[:2]
    rh = _interp_matrix(out_hw[0], h)
    rw = _interp_matrix(out_hw[1], w)
    return np.einsum("ai,bj,ijc->abc", rh, rw, image, optimize=True)


def bilinear_resize_adjoint(grad: np.ndarray, in_hw: tuple[int, int]) -> np.ndarray:
    """Transpose of bilinear_resize: pull a gradient back to the source size."""
    h, w = in_hw
    rh = _interp_matrix(grad.shape[0], h)
    rw = _interp_matrix(grad.shape[1], w)
    return np.einsum("ai,bj,abc->ijc", rh, rw, grad, optimize=True)


# --- member interface ----------------------------------------------------

class EncoderMember(Protocol):
    """One surrogate encoder.

    ``embed_image`` and ``embed_text`` return unit-norm vectors.
    ``cosine_gradient`` returns d cos(f_img(x), e) / dx at the member's own
    input size; the gateway handles any resize on either side of it.
    ``resolution`` of None means the member accepts crops at native size.
    """

    name: str
    resolution: tuple[int, int] | None

    def embed_image(self, image: np.ndarray) -> np.ndarray: ...

    def embed_text(self, text: str) -> np.ndarray: ...


@dataclass(frozen=True)
class GradientResult:
    """Loss and its gradient on the crop canvas."""

    loss: float
    gradient: np.ndarray

    def __post_init__(self):
        if not -1.0 - 1e-9 <= self.loss <= 1.0 + 1e-9:
            raise ValueError(f"cosine loss must lie in [-1, 1], got {self.loss}")


@dataclass
class SurrogateEnsemble:
    """Fixed set of members averaged into one objective."""

    members: tuple
    _text_cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.members = tuple(self.members)
        if not self.members:
            raise EncoderUnavailable("ensemble needs at least one member")

    def __len__(self) -> int:
        return len(self.members)


def _check_crop(crop: np.ndarray) -> np.ndarray:
    crop = np.asarray(crop, dtype=np.float64)
    if crop.ndim != 3 or crop.shape[2] != 3:
        raise ShapeMismatch(f"crop must be H x W x 3, got shape {crop.shape}")
    return crop


def _member_view(member, crop: np.ndarray) -> np.ndarray:
    res = getattr(member, "resolution", None)
    if res is not None and tuple(res) != crop.shape[:2]:
        return bilinear_resize(crop, tuple(res))
    return crop


def encode_text(ensemble: SurrogateEnsemble, text: str) -> list[np.ndarray]:
    """Per-member unit-norm text embeddings, cached per (member, text)."""
    if not text:
        raise ValueError("target text must be non-empty")
    out = []
    for member in ensemble.members:
        key = (member.name, text)
        if key not in ensemble._text_cache:
            emb = np.asarray(member.embed_text(text), dtype=np.float64)
            norm = float(np.linalg.norm(emb))
            if abs(norm - 1.0) > UNIT_NORM_TOLERANCE:
                raise ValueError(f"member {member.name} returned non-unit text embedding ({norm})")
            ensemble._text_cache[key] = emb
        out.append(ensemble._text_cache[key])
    return out


def surrogate_loss(
    ensemble: SurrogateEnsemble, crop: np.ndarray, target_embeddings: Sequence[np.ndarray]
) -> float:
    """Mean member cosine between the crop and the target text."""
    crop = _check_crop(crop)
    if len(target_embeddings) != len(ensemble.members):
        raise ShapeMismatch(
            f"{len(target_embeddings)} target embeddings for {len(ensemble.members)} members"
        )
    total = 0.0
    for member, emb in zip(ensemble.members, target_embeddings):
        view = _member_view(member, crop)
        img_emb = np.asarray(member.embed_image(view), dtype=np.float64)
        norm = float(np.linalg.norm(img_emb))
        if abs(norm - 1.0) > UNIT_NORM_TOLERANCE:
            raise ValueError(f"member {member.name} returned non-unit image embedding ({norm})")
        total += float(np.dot(img_emb, emb))
    return total / len(ensemble.members)


def loss_and_gradient(
    ensemble: SurrogateEnsemble, crop: np.ndarray, target_embeddings: Sequence[np.ndarray]
) -> GradientResult:
    """Objective and its gradient with respect to the crop pixels.

    Each member's gradient is computed at its own input size and pulled
    back through the resize adjoint, then averaged, so the result matches
    finite differences of surrogate_loss on the crop canvas.
    """
    crop = _check_crop(crop)
    if len(target_embeddings) != len(ensemble.members):
        raise ShapeMismatch(
            f"{len(target_embeddings)} target embeddings for {len(ensemble.members)} members"
        )
    loss_total = 0.0
    grad_total = np.zeros_like(crop)
    for member, emb in zip(ensemble.members, target_embeddings):
        grad_fn = getattr(member, "cosine_gradient", None)
        if grad_fn is None:
            raise NonDifferentiableMember(f"member {member.name} has no cosine_gradient")
        view = _member_view(member, crop)
        cos, grad = grad_fn(view, emb)
        if grad.shape != view.shape:
            raise ShapeMismatch(
                f"member {member.name} gradient shape {grad.shape} != input {view.shape}"
            )
        if view is not crop:
            grad = bilinear_resize_adjoint(grad, crop.shape[:2])
        loss_total += float(cos)
        grad_total += grad
    n = len(ensemble.members)
    return GradientResult(loss_total / n, grad_total / n)


# --- analytic stubs -------------------------------------------------------

def _embed_scalar(p: float) -> np.ndarray:
    # Place a scalar objective value on the unit circle so the generic
    # cosine-vs-basis-vector contract still holds exactly.
    p = min(max(p, -1.0), 1.0)
    return np.array([p, np.sqrt(max(0.0, 1.0 - p * p))])


_BASIS = np.array([1.0, 0.0])


@dataclass
class MaskedMeanEncoder:
    """Cosine reduces to <mask, x> / ||mask||_1, gradient mask / ||mask||_1.

    With ``mask=None`` the mask is all-ones at whatever size arrives, so
    the loss is the plain mean of the crop and the gradient the constant
    1 / #elements. The loss is linear in the pixels, which makes sign
    ascent behave in closed form.
    """

    mask: np.ndarray | None = None
    resolution: tuple[int, int] | None = None
    name: str = "stub-masked-mean"

    def _mask_for(self, image: np.ndarray) -> np.ndarray:
        if self.mask is None:
            return np.ones_like(image)
        mask = np.asarray(self.mask, dtype=np.float64)
        if mask.shape != image.shape:
            raise ShapeMismatch(f"mask shape {mask.shape} != input {image.shape}")
        if (mask < 0).any():
            raise ValueError("mask weights must be nonnegative")
        return mask

    def embed_text(self, text: str) -> np.ndarray:
        return _BASIS.copy()

    def embed_image(self, image: np.ndarray) -> np.ndarray:
        mask = self._mask_for(image)
        return _embed_scalar(float((mask * image).sum() / mask.sum()))

    def cosine_gradient(self, image, text_embedding):
        mask = self._mask_for(image)
        p = float((mask * image).sum() / mask.sum())
        return p, mask / mask.sum()


@dataclass
class QuadraticEncoder:
    """Loss is the mean squared pixel value; gradient 2x / n.

    The all-zero crop is a stationary point: loss 0, gradient exactly 0.
    """

    resolution: tuple[int, int] | None = None
    name: str = "stub-quadratic"

    def embed_text(self, text: str) -> np.ndarray:
        return _BASIS.copy()

    def embed_image(self, image: np.ndarray) -> np.ndarray:
        return _embed_scalar(float(np.mean(np.square(image))))

    def cosine_gradient(self, image, text_embedding):
        p = float(np.mean(np.square(image)))
        return p, 2.0 * image / image.size


class LinearProjectionEncoder:
    """Smooth stub: f_img(x) = normalize(P vec(x) + b).

    P and b are seeded per input shape, and the small bias keeps the
    embedding away from the origin so the normalization stays smooth
    everywhere, including the all-zero crop. The cosine against any text
    embedding then has the usual closed-form gradient, which is what the
    finite-difference checks exercise.
    """

    def __init__(self, dim: int = 16, seed: int = 0, resolution: tuple[int, int] | None = None,
                 name: str | None = None):
        self.dim = dim
        self.seed = seed
        self.resolution = tuple(resolution) if resolution is not None else None
        self.name = name or f"stub-linear-{dim}-{seed}"
        self._proj: dict[tuple, tuple[np.ndarray, np.ndarray]] = {}

    def _projection(self, shape) -> tuple[np.ndarray, np.ndarray]:
        key = tuple(shape)
        if key not in self._proj:
            n_in = int(np.prod(shape))
            rng = np.random.Generator(np.random.PCG64(
                np.random.SeedSequence(entropy=content_digest("linear-stub", self.seed, key))
            ))
            p = rng.normal(0.0, 1.0 / np.sqrt(n_in), size=(self.dim, n_in))
            b = 0.5 * rng.normal(size=self.dim)
            self._proj[key] = (p, b)
        return self._proj[key]

    def embed_text(self, text: str) -> np.ndarray:
        rng = np.random.Generator(np.random.PCG64(
            np.random.SeedSequence(entropy=content_digest("linear-stub-text", self.seed, text))
        ))
        v = rng.normal(size=self.dim)
        return v / np.linalg.norm(v)

    def embed_image(self, image: np.ndarray) -> np.ndarray:
        p, b = self._projection(image.shape)
        u = p @ image.ravel() + b
        return u / np.linalg.norm(u)

    def cosine_gradient(self, image, text_embedding):
        p, b = self._projection(image.shape)
        u = p @ image.ravel() + b
        nu = float(np.linalg.norm(u))
        cos = float(np.dot(u, text_embedding)) / nu
        du = text_embedding / nu - cos * u / (nu * nu)
        return cos, (p.T @ du).reshape(image.shape)


_STUB_KINDS = {"linear", "masked-mean", "quadratic"}


def make_stub_encoder(kind: str, **params):
    """Factory for the analytic stub members."""
    if kind == "linear":
        return LinearProjectionEncoder(**params)
    if kind == "masked-mean":
        return MaskedMeanEncoder(**params)
    if kind == "quadratic":
        return QuadraticEncoder(**params)
    raise UnknownKind(f"unknown stub kind {kind!r}; known: {sorted(_STUB_KINDS)}")


def default_stub_ensemble(seed: int = 0) -> SurrogateEnsemble:
    """Three smooth members at different resolutions, shaped like a small
    multi-encoder lineup."""
    members = (
        LinearProjectionEncoder(dim=16, seed=seed, resolution=(16, 16)),
        LinearProjectionEncoder(dim=24, seed=seed + 1, resolution=(32, 32)),
        LinearProjectionEncoder(dim=32, seed=seed + 2, resolution=None),
    )
    return SurrogateEnsemble(members)


@dataclass
class ExternalEncoderAdapter:
    """Bridge to an out-of-process encoder.

    Contract: ``embed_image_fn(crop) -> embedding`` and
    ``embed_text_fn(text) -> embedding`` receive the crop already resized
    to ``resolution`` (or native size when None) and must return unit-norm
    vectors; ``gradient_fn(crop, text_embedding) -> (cosine, gradient)``
    returns the gradient at the same size it was given. Leaving a callable
    unset raises EncoderUnavailable at call time, so a half-wired adapter
    fails loudly instead of silently skewing the ensemble mean.
    """

    name: str
    resolution: tuple[int, int] | None = None
    embed_image_fn: object = None
    embed_text_fn: object = None
    gradient_fn: object = None

    def embed_image(self, image):
        if self.embed_image_fn is None:
            raise EncoderUnavailable(f"{self.name}: no image encoder attached")
        return np.asarray(self.embed_image_fn(image), dtype=np.float64)

    def embed_text(self, text):
        if self.embed_text_fn is None:
            raise EncoderUnavailable(f"{self.name}: no text encoder attached")
        return np.asarray(self.embed_text_fn(text), dtype=np.float64)

    def cosine_gradient(self, image, text_embedding):
        if self.gradient_fn is None:
            raise NonDifferentiableMember(f"{self.name}: no gradient backend attached")
        cos, grad = self.gradient_fn(image, text_embedding)
        return float(cos), np.asarray(grad, dtype=np.float64)
