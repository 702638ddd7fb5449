"""Finite-difference audit of every differentiable building block.

Each named check builds a small 64-bit problem and compares tape gradients
against central differences. Checks always run at float64 regardless of the
ambient default dtype; rough-input cases (relu kinks, pooling ties) seed
their inputs away from the nondifferentiable points.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tt
from .errors import ContractError
from .losses import consis_loss, contra_loss, dice_loss
from .network import SegNet, SegNetConfig
from .spectral import (FSRLayer, Spectrum, StyleGate, amplitude_instance_norm,
                       fft2, ifft2, style_gate)
from .tensor import Parameter, Tensor, finite_diff_check

_CHECKS = {}


def _register(name: str):
    def deco(fn):
        _CHECKS[name] = fn
        return fn
    return deco


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tolerance


def check_names() -> tuple:
    return tuple(_CHECKS)


def run_all(names=None, tolerance: float = 1e-3) -> list:
    """Run the selected checks (all by default); returns CheckResult list."""
    prev = tt.default_dtype()
    tt.set_default_dtype(np.float64)
    try:
        selected = tuple(_CHECKS) if names is None else tuple(names)
        results = []
        for name in selected:
            if name not in _CHECKS:
                raise ContractError(f"unknown gradient check {name!r}")
            err = float(_CHECKS[name]())
            results.append(CheckResult(name, err, tolerance))
        return results
    finally:
        tt.set_default_dtype(prev)


def _wsum(t: Tensor, seed: int = 17) -> Tensor:
    # fixed random weights make the scalarized gradient dense and asymmetric
    w = np.random.default_rng(seed).uniform(0.5, 1.5, size=t.data.shape)
    return tt.tsum(tt.mul(t, Tensor(w)))


def _param(name, rng, shape, low=-1.0, high=1.0) -> Parameter:
    return Parameter(name, rng.uniform(low, high, size=shape))


def _away_from(x: np.ndarray, point: float, margin: float = 0.05) -> np.ndarray:
    near = np.abs(x - point) < margin
    x[near] += margin * np.where(x[near] >= point, 1.0, -1.0)
    return x


@_register("add")
def _check_add():
    rng = np.random.default_rng(0)
    a, b = _param("a", rng, (3, 4)), _param("b", rng, (3, 4))
    return finite_diff_check(lambda: _wsum(tt.add(a, b)), [a, b])


@_register("sub")
def _check_sub():
    rng = np.random.default_rng(1)
    a, b = _param("a", rng, (3, 4)), _param("b", rng, (3, 4))
    return finite_diff_check(lambda: _wsum(tt.sub(a, b)), [a, b])


@_register("mul")
def _check_mul():
    rng = np.random.default_rng(2)
    a, b = _param("a", rng, (3, 4)), _param("b", rng, (3, 4))
    return finite_diff_check(lambda: _wsum(tt.mul(a, b)), [a, b])


@_register("div")
def _check_div():
    rng = np.random.default_rng(3)
    a = _param("a", rng, (3, 4))
    b = _param("b", rng, (3, 4), low=0.5, high=1.5)
    return finite_diff_check(lambda: _wsum(tt.div(a, b)), [a, b])


@_register("neg-scale")
def _check_neg_scale():
    rng = np.random.default_rng(4)
    a = _param("a", rng, (3, 4))
    return finite_diff_check(lambda: _wsum(tt.scale(tt.neg(a), 0.7)), [a])


@_register("exp-log")
def _check_exp_log():
    rng = np.random.default_rng(5)
    a = _param("a", rng, (3, 4), low=0.5, high=2.0)
    return finite_diff_check(lambda: _wsum(tt.log(tt.exp(a))), [a])


@_register("sqrt")
def _check_sqrt():
    rng = np.random.default_rng(6)
    a = _param("a", rng, (3, 4), low=0.5, high=2.0)
    return finite_diff_check(lambda: _wsum(tt.sqrt(a)), [a])


@_register("clamp_min")
def _check_clamp_min():
    rng = np.random.default_rng(7)
    a = Parameter("a", _away_from(rng.uniform(-1, 1, (4, 4)), 0.2))
    return finite_diff_check(lambda: _wsum(tt.clamp_min(a, 0.2)), [a])


@_register("relu")
def _check_relu():
    rng = np.random.default_rng(8)
    a = Parameter("a", _away_from(rng.uniform(-1, 1, (4, 4)), 0.0))
    return finite_diff_check(lambda: _wsum(tt.relu(a)), [a])


@_register("leaky_relu")
def _check_leaky_relu():
    rng = np.random.default_rng(9)
    a = Parameter("a", _away_from(rng.uniform(-1, 1, (4, 4)), 0.0))
    return finite_diff_check(lambda: _wsum(tt.leaky_relu(a, 0.1)), [a])


@_register("sigmoid")
def _check_sigmoid():
    rng = np.random.default_rng(10)
    a = _param("a", rng, (3, 4), low=-2.0, high=2.0)
    return finite_diff_check(lambda: _wsum(tt.sigmoid(a)), [a])


@_register("tsum-axes")
def _check_tsum():
    rng = np.random.default_rng(11)
    a = _param("a", rng, (2, 3, 4))
    return finite_diff_check(
        lambda: _wsum(tt.tsum(a, axis=(0, 2))), [a])


@_register("tmean-axes")
def _check_tmean():
    rng = np.random.default_rng(12)
    a = _param("a", rng, (2, 3, 4))
    return finite_diff_check(
        lambda: _wsum(tt.tmean(a, axis=1, keepdims=True)), [a])


@_register("reshape-narrow")
def _check_reshape_narrow():
    rng = np.random.default_rng(13)
    a = _param("a", rng, (3, 8))
    return finite_diff_check(
        lambda: _wsum(tt.narrow(tt.reshape(a, (6, 4)), 0, 1, 4)), [a])


@_register("concat")
def _check_concat():
    rng = np.random.default_rng(14)
    a, b = _param("a", rng, (2, 3)), _param("b", rng, (4, 3))
    return finite_diff_check(lambda: _wsum(tt.concat([a, b], axis=0)), [a, b])


@_register("concat_channels")
def _check_concat_channels():
    rng = np.random.default_rng(15)
    a = _param("a", rng, (2, 2, 4, 4))
    b = _param("b", rng, (2, 3, 4, 4))
    return finite_diff_check(lambda: _wsum(tt.concat_channels([a, b])), [a, b])


@_register("softmax")
def _check_softmax():
    rng = np.random.default_rng(16)
    a = _param("a", rng, (2, 3, 4), low=-2.0, high=2.0)
    return finite_diff_check(lambda: _wsum(tt.softmax(a, axis=1)), [a])


@_register("linear")
def _check_linear():
    rng = np.random.default_rng(17)
    x = _param("x", rng, (5, 4))
    w = _param("w", rng, (3, 4))
    b = _param("b", rng, (3,))
    return finite_diff_check(lambda: _wsum(tt.linear(x, w, b)), [x, w, b])


@_register("conv2d")
def _check_conv2d():
    rng = np.random.default_rng(18)
    x = _param("x", rng, (2, 2, 5, 5))
    w = _param("w", rng, (3, 2, 3, 3))
    b = _param("b", rng, (3,))
    return finite_diff_check(
        lambda: _wsum(tt.conv2d(x, w, b, padding=1)), [x, w, b])


@_register("conv2d-strided")
def _check_conv2d_strided():
    rng = np.random.default_rng(19)
    x = _param("x", rng, (1, 2, 7, 7))
    w = _param("w", rng, (2, 2, 3, 3))
    return finite_diff_check(
        lambda: _wsum(tt.conv2d(x, w, stride=2, padding=1)), [x, w])


@_register("maxpool2x")
def _check_maxpool():
    rng = np.random.default_rng(20)
    x = rng.uniform(0, 1, (2, 2, 4, 4))
    # break window ties far beyond the probe step
    x += np.arange(x.size).reshape(x.shape) * 1e-3
    p = Parameter("x", x)
    return finite_diff_check(lambda: _wsum(tt.maxpool2x(p)), [p])


@_register("nearest_upsample2x")
def _check_upsample():
    rng = np.random.default_rng(21)
    x = _param("x", rng, (2, 2, 3, 3))
    return finite_diff_check(lambda: _wsum(tt.nearest_upsample2x(x)), [x])


@_register("global_avg_pool")
def _check_gap():
    rng = np.random.default_rng(22)
    x = _param("x", rng, (2, 3, 4, 4))
    return finite_diff_check(lambda: _wsum(tt.global_avg_pool(x)), [x])


@_register("instance_norm")
def _check_instance_norm():
    rng = np.random.default_rng(23)
    x = _param("x", rng, (2, 3, 4, 4))
    return finite_diff_check(lambda: _wsum(tt.instance_norm(x)), [x])


@_register("fft2-amplitude")
def _check_fft2_amplitude():
    rng = np.random.default_rng(24)
    z = _param("z", rng, (2, 4, 4), low=0.5, high=1.5)
    return finite_diff_check(lambda: _wsum(fft2(z).amplitude), [z])


@_register("fft2-phase")
def _check_fft2_phase():
    rng = np.random.default_rng(25)
    z = _param("z", rng, (2, 4, 4), low=0.5, high=1.5)
    return finite_diff_check(lambda: _wsum(fft2(z).phase), [z])


@_register("ifft2")
def _check_ifft2():
    rng = np.random.default_rng(26)
    base = fft2(Tensor(rng.uniform(0.5, 1.5, (2, 4, 4))))
    amp = Parameter("amp", base.amplitude.data)
    phase = Parameter("phase", base.phase.data)
    # probing single spectrum entries breaks conjugate symmetry by design,
    # so the reconstruction residue guard must sit out
    prev = tt.checked_enabled()
    tt.set_checked(False)
    try:
        return finite_diff_check(
            lambda: _wsum(ifft2(Spectrum(amp, phase))), [amp, phase])
    finally:
        tt.set_checked(prev)


@_register("style-gate")
def _check_style_gate():
    rng = np.random.default_rng(27)
    chi_norm = _param("cn", rng, (2, 3, 4, 4))
    chi = _param("c", rng, (2, 3, 4, 4), low=0.0, high=1.0)
    w = _param("gw", rng, (2, 6), low=-0.5, high=0.5)
    b = _param("gb", rng, (2,), low=-0.5, high=0.5)
    gate = StyleGate(w, b)

    def loss():
        lam_norm, lam_org = style_gate(chi_norm, chi, gate)
        return tt.add(_wsum(lam_norm), _wsum(lam_org, seed=18))
    return finite_diff_check(loss, [chi_norm, chi, w, b])


@_register("fsr-composite")
def _check_fsr_composite():
    # full fft -> normalize -> gate -> recompose -> ifft path in one graph
    rng = np.random.default_rng(28)
    layer = FSRLayer("t", channels=2)
    layer.gate.weight.data += rng.normal(0, 0.3, layer.gate.weight.data.shape)
    layer.gate.bias.data += rng.normal(0, 0.3, layer.gate.bias.data.shape)
    z = _param("z", rng, (1, 2, 8, 8), low=0.2, high=1.2)
    params = [z, layer.gate.weight, layer.gate.bias]
    return finite_diff_check(lambda: _wsum(layer(z)), params)


@_register("amplitude-norm")
def _check_amplitude_norm():
    rng = np.random.default_rng(29)
    amp = _param("a", rng, (2, 4, 4), low=0.1, high=2.0)
    return finite_diff_check(lambda: _wsum(amplitude_instance_norm(amp)), [amp])


@_register("dice-loss")
def _check_dice():
    rng = np.random.default_rng(30)
    logits = _param("l", rng, (2, 2, 6, 6), low=-1.5, high=1.5)
    labels = rng.integers(0, 2, size=(2, 6, 6))
    return finite_diff_check(lambda: dice_loss(logits, labels), [logits])


@_register("contra-loss")
def _check_contra():
    rng = np.random.default_rng(31)
    anchor = _param("e", rng, (5,))
    positives = [rng.normal(size=5) for _ in range(2)]
    negatives = [rng.normal(size=5) for _ in range(3)]
    return finite_diff_check(
        lambda: contra_loss(anchor, positives, negatives, tau=0.4), [anchor])


@_register("consis-loss")
def _check_consis():
    rng = np.random.default_rng(32)
    e_enc = _param("ee", rng, (4,))
    e_dec = _param("ed", rng, (4,))
    mean_enc, mean_dec = rng.normal(size=4), rng.normal(size=4)
    return finite_diff_check(
        lambda: consis_loss(e_enc, e_dec, mean_enc, mean_dec), [e_enc, e_dec])


@_register("segnet-dice")
def _check_segnet():
    # end to end through the whole network, sampled entries per parameter
    rng = np.random.default_rng(33)
    model = SegNet(SegNetConfig(input_channels=1, class_count=2), seed=5)
    x = rng.uniform(0, 1, (1, 1, 8, 8))
    labels = rng.integers(0, 2, size=(1, 8, 8))

    def loss():
        logits, _ = model.forward(Tensor(x))
        return dice_loss(logits, labels)
    return finite_diff_check(loss, model.parameters(), sample_per_param=2)
