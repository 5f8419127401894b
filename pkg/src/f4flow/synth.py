"""Synthetic phase-contrast signal generation and k-space downsampling."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Tuple, Union

import numpy as np

from .volume import ComplexField, FlowSample, FluidMask, ScalarField, VectorField, VolumeGrid

NOISE_BEFORE_CROP = "before-crop"
NOISE_AFTER_CROP = "after-crop"


class AliasingError(ValueError):
    """A velocity component exceeds the VENC and would wrap in phase."""


@dataclass(frozen=True)
class NoiseSpec:
    """Target SNR: mean fluid magnitude over per-channel complex noise std."""

    snr: float
    seed: int = 0

    def __post_init__(self):
        if not self.snr > 0:
            raise ValueError("snr must be positive")

    def sigma(self, mean_fluid_magnitude: float) -> float:
        if math.isinf(self.snr):
            return 0.0
        return float(mean_fluid_magnitude) / self.snr


@dataclass(frozen=True)
class SynthPair:
    hr: FlowSample
    lr: FlowSample
    sigma: float = 0.0

    def __post_init__(self):
        hg, lg = self.hr.grid, self.lr.grid
        if (hg.nx, hg.ny, hg.nz) != (2 * lg.nx, 2 * lg.ny, 2 * lg.nz):
            raise ValueError("lr grid must be exactly half the hr grid")
        if self.hr.venc != self.lr.venc or self.hr.compartment != self.lr.compartment:
            raise ValueError("hr and lr must share venc and compartment")


def encode_signal(velocity: VectorField, magnitude: ScalarField, venc: float):
    """Phase-encode each velocity component: ``M * exp(i*pi*v/venc)``.

    Returns three double-precision :class:`ComplexField` objects (x, y, z).
    """
    if not venc > 0:
        raise ValueError("venc must be positive")
    if velocity.max_abs() > venc:
        raise AliasingError(f"aliasing: |v| up to {velocity.max_abs():.4g} exceeds venc {venc:g}")
    mag = magnitude.values.astype(np.float64)
    out = []
    for comp in (velocity.vx, velocity.vy, velocity.vz):
        phase = np.pi * comp.astype(np.float64) / venc
        out.append(ComplexField(velocity.grid, mag * np.cos(phase), mag * np.sin(phase)))
    return tuple(out)


def decode_signal(signals, venc: float) -> Tuple[VectorField, ScalarField]:
    """Recover velocity from phase and magnitude as the mean channel modulus."""
    grid = signals[0].grid
    comps = [venc * np.arctan2(s.im, s.re) / np.pi for s in signals]
    mag = np.mean([np.hypot(s.re, s.im) for s in signals], axis=0)
    return VectorField(grid, *comps), ScalarField(grid, mag)


def _rng(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


def add_complex_noise(signal: ComplexField, sigma: float, rng) -> ComplexField:
    """Add independent N(0, sigma^2) to the real and imaginary channels."""
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    if sigma == 0:
        return signal
    gen = _rng(rng)
    shape = signal.grid.shape
    re = signal.re + gen.normal(0.0, sigma, shape)
    im = signal.im + gen.normal(0.0, sigma, shape)
    return ComplexField(signal.grid, re, im)


def _crop_slices(shape, factor):
    slices = []
    for n in shape:
        m = n // factor
        # small-grid frequencies -(m//2) .. (m-1)//2 in shifted order
        start = n // 2 - m // 2
        slices.append(slice(start, start + m))
    return tuple(slices)


def kspace_truncate(signal: ComplexField, factor: int = 2) -> ComplexField:
    """Downsample by keeping the centred 1/factor block of the 3D spectrum.

    The result is scaled by ``1/factor**3`` so constant fields are preserved and
    the output spacing is ``factor * dx``.
    """
    if factor < 1:
        raise ValueError("factor must be >= 1")
    shape = signal.grid.shape
    if any(n % 2 for n in shape):
        raise ValueError(f"k-space truncation needs even dims, got {shape}")
    if any(n % factor for n in shape):
        raise ValueError(f"dims {shape} not divisible by factor {factor}")
    spec = np.fft.fftshift(np.fft.fftn(signal.to_complex()))
    small = spec[_crop_slices(shape, factor)]
    img = np.fft.ifftn(np.fft.ifftshift(small)) / factor ** 3
    dtype = signal.re.dtype
    return ComplexField(signal.grid.downsampled(factor), img.real.astype(dtype), img.imag.astype(dtype))


def downsample_mask(mask: FluidMask, factor: int = 2) -> FluidMask:
    """Majority vote over each factor^3 block; ties count as fluid."""
    nz, ny, nx = mask.grid.shape
    f = factor
    blocks = mask.fluid.reshape(nz // f, f, ny // f, f, nx // f, f)
    counts = blocks.sum(axis=(1, 3, 5))
    return FluidMask(mask.grid.downsampled(f), 2 * counts >= f ** 3)


def mean_fluid_magnitude(sample: FlowSample) -> float:
    fluid = sample.mask.fluid
    if not fluid.any():
        return float(sample.magnitude.values.mean())
    return float(sample.magnitude.values[fluid].mean())


def synthesize_pair(hr_sample: FlowSample, noise: NoiseSpec, factor: int = 2,
                    noise_order: str = NOISE_BEFORE_CROP) -> SynthPair:
    """Noise-free high-resolution sample paired with its noisy low-res twin.

    The low-resolution sample is ``decode(truncate(noise(encode(hr))))``; with
    ``noise_order="after-crop"`` the noise is added on the coarse grid instead.
    """
    if noise_order not in (NOISE_BEFORE_CROP, NOISE_AFTER_CROP):
        raise ValueError(f"unknown noise order {noise_order!r}")
    if any(n % 2 for n in hr_sample.grid.shape):
        raise ValueError("high-resolution dims must be even")
    sigma = noise.sigma(mean_fluid_magnitude(hr_sample))
    rng = np.random.default_rng(noise.seed)
    signals = encode_signal(hr_sample.velocity, hr_sample.magnitude, hr_sample.venc)
    low = []
    for s in signals:
        if noise_order == NOISE_BEFORE_CROP:
            low.append(kspace_truncate(add_complex_noise(s, sigma, rng), factor))
        else:
            low.append(add_complex_noise(kspace_truncate(s, factor), sigma, rng))
    vel, mag = decode_signal(low, hr_sample.venc)
    lr = FlowSample(mag, vel, downsample_mask(hr_sample.mask, factor), hr_sample.venc,
                    hr_sample.compartment, hr_sample.frame, dict(hr_sample.meta))
    return SynthPair(hr_sample, lr, sigma)


def downsample_velocity(sample: FlowSample, factor: int = 2) -> FlowSample:
    """Noise-free k-space downsampling of a whole sample (recover-native input)."""
    return synthesize_pair(sample, NoiseSpec(math.inf), factor).lr
