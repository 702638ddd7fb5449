"""2D Fourier decomposition of feature maps and the style recalibration layer.

A feature map z is split per channel into an amplitude spectrum (style) and
a phase spectrum (content). The forward transform carries a 1/(HW) factor,

    Z(a,b) = (1/HW) sum_{h,w} z(h,w) exp(-2i pi (a h / H + b w / W)),

so the inverse is the plain unnormalized sum with the opposite sign. The
transform core is a hand-rolled iterative radix-2 FFT for power-of-two
extents, with a direct matrix DFT fallback for other sizes; both vectorize
over all leading axes. fft2/ifft2 are differentiable: the backward formulas
for amplitude/phase are derived from R, I by the chain rule and pushed back
through the (linear) transform.
"""
from __future__ import annotations

import numpy as np

from . import tensor as tt
from .errors import ContractError, DimensionError, SpectralConsistencyError
from .tensor import Parameter, Tensor, _accum, _check

# avoids 0/0 in phase gradients at zero-amplitude bins; the f32 floor is
# wide enough that its square stays a normal number
_AMP_FLOOR = {np.dtype(np.float64): 1e-30, np.dtype(np.float32): 1e-12}


_DFT_CACHE: dict = {}


def _dft_matrix(n: int, sign: int, ctype=np.complex128) -> np.ndarray:
    key = (n, sign, ctype)
    mat = _DFT_CACHE.get(key)
    if mat is None:
        k = np.arange(n)
        mat = np.exp(sign * 2j * np.pi * np.outer(k, k) / n).astype(ctype)
        _DFT_CACHE[key] = mat
    return mat


_TWIDDLE_CACHE: dict = {}


def _twiddle(m: int, sign: int, ctype=np.complex128) -> np.ndarray:
    key = (m, sign, ctype)
    tw = _TWIDDLE_CACHE.get(key)
    if tw is None:
        tw = np.exp(sign * 1j * np.pi * np.arange(m) / m).astype(ctype)
        _TWIDDLE_CACHE[key] = tw
    return tw


# The radix-2 recursion bottoms out in directly evaluated base blocks; 16 is
# the crossover below which one BLAS product beats further butterfly stages.
_BASE = 16


def _fft_last_axis(a: np.ndarray, sign: int) -> np.ndarray:
    """Unnormalized DFT along the last axis; sign -1 forward, +1 inverse.

    Power-of-two extents run a radix-2 decimation-in-time in the autosorting
    (Stockham) arrangement: size-8 base blocks evaluated directly, then
    butterfly stages on contiguous halves. Other extents fall back to one
    matmul against the DFT matrix.
    """
    n = a.shape[-1]
    ctype = a.dtype if a.dtype in (np.complex64, np.complex128) else np.complex128
    if n & (n - 1) or n <= _BASE:
        return a @ _dft_matrix(n, sign, ctype)
    lead = a.shape[:-1]
    m, q = _BASE, n // _BASE
    # v[..., j, k] holds the m-point DFT of the stride-q subsequence at j
    blocks = np.ascontiguousarray(
        np.swapaxes(a.reshape(lead + (m, q)), -1, -2), dtype=ctype)
    v = (blocks.reshape(-1, m) @ _dft_matrix(m, sign, ctype).T).reshape(lead + (q, m))
    while m < n:
        half = q // 2
        t = v[..., half:, :] * _twiddle(m, sign, ctype)
        w = np.empty(lead + (half, 2 * m), dtype=v.dtype)
        np.add(v[..., :half, :], t, out=w[..., :, :m])
        np.subtract(v[..., :half, :], t, out=w[..., :, m:])
        v = w
        m, q = 2 * m, half
    return v.reshape(a.shape)


def _transform2(x: np.ndarray, sign: int) -> np.ndarray:
    """Unnormalized 2D DFT over the trailing two axes of x; the complex
    width follows the input precision."""
    ctype = np.complex64 if x.dtype == np.float32 else np.complex128
    z = np.asarray(x, dtype=x.dtype if x.dtype in (np.complex64, np.complex128) else ctype)
    z = _fft_last_axis(z, sign)
    z = np.swapaxes(z, -1, -2)
    z = _fft_last_axis(np.ascontiguousarray(z), sign)
    return np.swapaxes(z, -1, -2)


class Spectrum:
    """Amplitude/phase pair of a real feature map, trailing axes (H,W)."""

    __slots__ = ("amplitude", "phase")

    def __init__(self, amplitude: Tensor, phase: Tensor):
        if amplitude.data.shape != phase.data.shape:
            raise DimensionError("amplitude and phase shapes differ")
        self.amplitude = amplitude
        self.phase = phase

    @property
    def shape(self):
        return self.amplitude.data.shape


def fft2(z: Tensor) -> Spectrum:
    """Per-channel normalized 2D DFT of a real map, as amplitude and phase."""
    if z.ndim < 2:
        raise DimensionError("fft2 expects trailing (H,W) axes")
    h, w = z.data.shape[-2:]
    if h < 2 or w < 2:
        raise ContractError("fft2 needs H, W >= 2")
    zc = _transform2(z.data, -1) / (h * w)
    re, im = zc.real, zc.imag
    # the transform leaves swapped strides; downstream ops want C order
    amp = np.ascontiguousarray(np.hypot(re, im))
    phase = np.ascontiguousarray(np.arctan2(im, re))
    out_amp = Tensor(_check(amp, "fft2"), z.requires_grad)
    out_phase = Tensor(_check(phase, "fft2"), z.requires_grad)

    tape = tt.active_tape()
    if tape is not None and z.requires_grad:
        def _bwd():
            ga = out_amp.grad
            gp = out_phase.grad
            if ga is None and gp is None:
                return
            safe = np.maximum(amp, _AMP_FLOOR[amp.dtype])
            d_re = np.zeros_like(amp)
            d_im = np.zeros_like(amp)
            if ga is not None:
                d_re += ga * re / safe
                d_im += ga * im / safe
            if gp is not None:
                d_re -= gp * im / (safe * safe)
                d_im += gp * re / (safe * safe)
            ctype = np.complex64 if d_re.dtype == np.float32 else np.complex128
            dc = np.empty(d_re.shape, ctype)
            dc.real, dc.imag = d_re, d_im
            dz = _transform2(dc, +1).real / (h * w)
            _accum(z, _check(dz, "fft2 backward"))
        tape.record(_bwd)
    return Spectrum(out_amp, out_phase)


def ifft2(spec: Spectrum) -> Tensor:
    """Reconstruct the real map from amplitude and phase.

    In checked mode the imaginary residue of the reconstruction is asserted
    to be negligible; a violation means the spectrum lost the conjugate
    symmetry a real map requires.
    """
    amp, phase = spec.amplitude, spec.phase
    # cos/sin assembly; complex exp is an order of magnitude slower here
    ctype = np.complex64 if phase.data.dtype == np.float32 else np.complex128
    cis = np.empty(phase.data.shape, ctype)
    np.cos(phase.data, out=cis.real)
    np.sin(phase.data, out=cis.imag)
    wc = _transform2(amp.data * cis, +1)
    re = wc.real
    if tt.checked_enabled():
        residue = np.max(np.abs(wc.imag))
        tol = 1e-6 if wc.dtype == np.complex128 else 1e-3
        limit = tol * max(1.0, float(np.max(np.abs(re))))
        if residue > limit:
            raise SpectralConsistencyError(
                f"imaginary residue {residue:.3e} exceeds {limit:.3e}; "
                "spectrum is not conjugate-symmetric")
    rg = amp.requires_grad or phase.requires_grad
    out = Tensor(_check(np.ascontiguousarray(re), "ifft2"), rg)

    tape = tt.active_tape()
    if tape is not None and rg:
        def _bwd():
            if out.grad is None:
                return
            back = _transform2(out.grad, +1)
            prod = cis * back
            if amp.requires_grad:
                _accum(amp, _check(prod.real, "ifft2 backward"))
            if phase.requires_grad:
                _accum(phase, _check(-amp.data * prod.imag, "ifft2 backward"))
        tape.record(_bwd)
    return out


def amplitude_instance_norm(amp: Tensor, eps: float = 1e-5) -> Tensor:
    """Zero-mean unit-variance normalization of each channel's amplitude
    over the frequency grid. The result is signed."""
    return tt.instance_norm(amp, eps=eps)


class StyleGate:
    """Two-scalar gate balancing normalized against original amplitude.

    weight: (2, 2C) applied to [GAP(chi_norm); GAP(chi)], bias: (2,).
    Zero-initialized parameters start the gate at (0.5, 0.5).
    """

    __slots__ = ("weight", "bias")

    def __init__(self, weight: Tensor, bias: Tensor):
        if weight.ndim != 2 or weight.data.shape[0] != 2:
            raise DimensionError("style gate weight must be (2, 2C)")
        if bias.data.shape != (2,):
            raise DimensionError("style gate bias must be (2,)")
        self.weight = weight
        self.bias = bias


def style_gate(chi_norm: Tensor, chi: Tensor, gate: StyleGate):
    """Pooled-amplitude gating: sigmoid(W [GAP(chi_norm); GAP(chi)] + b).

    Returns (lam_norm, lam_org); scalars for a (C,H,W) input, per-sample
    columns of shape (N,1) for a batched input.
    """
    pooled = tt.concat([tt.global_avg_pool(chi_norm), tt.global_avg_pool(chi)], axis=-1)
    gates = tt.sigmoid(tt.linear(pooled, gate.weight, gate.bias))
    lam_norm = tt.narrow(gates, -1, 0, 1)
    lam_org = tt.narrow(gates, -1, 1, 1)
    if chi.ndim == 3:
        lam_norm = tt.reshape(lam_norm, ())
        lam_org = tt.reshape(lam_org, ())
    return lam_norm, lam_org


def fsr_forward(z: Tensor, gate: StyleGate) -> Tensor:
    """Recalibrate style: renormalize the amplitude spectrum under learned
    gates while keeping the phase spectrum untouched.

    The recombined amplitude lam_norm*chi_norm + lam_org*chi is clamped at
    zero from below, since the normalized term is signed.
    """
    spec = fft2(z)
    chi, gamma = spec.amplitude, spec.phase
    chi_norm = amplitude_instance_norm(chi)
    lam_norm, lam_org = style_gate(chi_norm, chi, gate)
    if z.ndim == 4:
        n = z.data.shape[0]
        lam_norm = tt.reshape(lam_norm, (n, 1, 1, 1))
        lam_org = tt.reshape(lam_org, (n, 1, 1, 1))
    recombined = tt.add(tt.mul(lam_norm, chi_norm), tt.mul(lam_org, chi))
    return ifft2(Spectrum(tt.clamp_min(recombined, 0.0), gamma))


class FSRLayer:
    """In-line style recalibration at a tapped layer.

    Frozen layers bypass the transform entirely, which makes the no-FSR
    baseline bit-exact rather than identical only up to FFT round-trip
    error.
    """

    def __init__(self, prefix: str, channels: int):
        self.gate = StyleGate(
            Parameter(f"{prefix}.gate.weight", np.zeros((2, 2 * channels))),
            Parameter(f"{prefix}.gate.bias", np.zeros(2)))
        self.frozen = False

    def parameters(self):
        return [self.gate.weight, self.gate.bias]

    def __call__(self, z: Tensor) -> Tensor:
        if self.frozen:
            return z
        return fsr_forward(z, self.gate)
