"""Cubic Bezier intensity remapping used to synthesize style-shifted domains."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import DomainDataset
from .errors import ConfigError, DataError

LUT_BINS = 1024
IDENTITY_VALUES = (0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0)


@dataclass(frozen=True)
class BezierCurve:
    """Control values at t = 0, 1/3, 2/3, 1.

    With evenly spaced abscissae the Bezier x-coordinate equals t, so the
    curve is the cubic Bernstein polynomial in the control values.
    ``inverted`` evaluates with the control values reversed.
    """

    values: tuple[float, float, float, float] = IDENTITY_VALUES
    inverted: bool = False
    _lut: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        values = tuple(float(v) for v in self.values)
        if len(values) != 4 or not all(0.0 <= v <= 1.0 for v in values):
            raise ConfigError(f"need 4 control values in [0, 1], got {self.values}")
        object.__setattr__(self, "values", values)
        grid = np.linspace(0.0, 1.0, LUT_BINS)
        object.__setattr__(self, "_lut", self.evaluate(grid))

    @property
    def effective_values(self) -> tuple[float, ...]:
        return self.values[::-1] if self.inverted else self.values

    def evaluate(self, t) -> np.ndarray:
        """Exact polynomial evaluation (no lookup table)."""
        t = np.asarray(t, dtype=np.float64)
        v0, v1, v2, v3 = self.effective_values
        u = 1.0 - t
        out = u**3 * v0 + 3 * u**2 * t * v1 + 3 * u * t**2 * v2 + t**3 * v3
        return np.clip(out, 0.0, 1.0)

    def __call__(self, t) -> np.ndarray:
        return np.interp(t, np.linspace(0.0, 1.0, LUT_BINS), self._lut)


def sample_bezier(rng: np.random.Generator, strength: float = 0.9) -> BezierCurve:
    if not 0.0 <= strength <= 1.0:
        raise ConfigError(f"strength must lie in [0, 1], got {strength}")
    raw = rng.uniform(0.0, 1.0, size=4)
    inverted = bool(rng.uniform() < 0.5)
    identity = np.array(IDENTITY_VALUES)
    # blend in evaluation order so strength 0 is the identity map either way
    anchor = identity[::-1] if inverted else identity
    values = strength * raw + (1.0 - strength) * anchor
    return BezierCurve(tuple(np.clip(values, 0.0, 1.0)), inverted)


def apply_bezier(image: np.ndarray, curve: BezierCurve) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if not np.all(np.isfinite(image)) or image.min(initial=0.0) < 0.0 or image.max(initial=0.0) > 1.0:
        raise DataError("intensities must be finite and pre-scaled to [0, 1]")
    return curve(image)


def build_augmented_domains(
    src: DomainDataset,
    num_domains: int,
    rng: np.random.Generator,
    strength: float = 0.9,
) -> list[DomainDataset]:
    """One fresh curve per augmented domain; ids follow the source id."""
    if num_domains < 1:
        raise ConfigError(f"need at least one augmented domain, got {num_domains}")
    return augment_with(src, [sample_bezier(rng, strength) for _ in range(num_domains)])


def augment_with(src: DomainDataset, curves: list[BezierCurve]) -> list[DomainDataset]:
    """Apply fixed curves to ``src``, e.g. to build matching validation splits."""
    return [
        DomainDataset(
            images=apply_bezier(src.images, curve),
            masks=src.masks.copy(),
            domain_id=src.domain_id + 1 + a,
            name=f"{src.name}-aug{a}",
            num_classes=src.num_classes,
            meta={"curve": " ".join(f"{v:.6f}" for v in curve.values), "inverted": str(curve.inverted)},
        )
        for a, curve in enumerate(curves)
    ]
