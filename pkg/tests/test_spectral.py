import numpy as np
import pytest

from fedbcs import spectral as sp
from fedbcs import tensor as T
from fedbcs.errors import SpectralConsistencyError
from fedbcs.tensor import Parameter, Tensor


def dft_oracle(z):
    """O(N^2) direct-summation DFT with the 1/(HW) normalization."""
    c, h, w = z.shape
    out = np.zeros((c, h, w), dtype=complex)
    hh = np.arange(h)[:, None]
    ww = np.arange(w)[None, :]
    for ci in range(c):
        for a in range(h):
            for b in range(w):
                kernel = np.exp(-2j * np.pi * (a * hh / h + b * ww / w))
                out[ci, a, b] = (z[ci] * kernel).sum() / (h * w)
    return np.abs(out), np.angle(out)


def wrap(delta):
    """Map angle differences into (-pi, pi] so pi and -pi compare equal."""
    return np.angle(np.exp(1j * delta))


def bump_image(centers, h=32):
    yy, xx = np.mgrid[0:h, 0:h].astype(float)
    img = np.zeros((h, h))
    for cy, cx, s in centers:
        img += np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * s * s))
    return img


class TestFFT2:
    def test_constant_map_is_dc_only(self):
        v = 2.75
        spec = sp.fft2(Tensor(np.full((2, 4, 4), v)))
        amp, phase = spec.amplitude.data, spec.phase.data
        assert amp[:, 0, 0] == pytest.approx([v, v], abs=1e-12)
        mask = np.ones((4, 4), bool)
        mask[0, 0] = False
        assert np.abs(amp[:, mask]).max() < 1e-12
        assert abs(phase[0, 0, 0]) < 1e-12

    def test_parseval(self):
        rng = np.random.default_rng(0)
        for shape in ((2, 8, 8), (1, 6, 6), (3, 5, 7), (2, 16, 16)):
            z = rng.normal(size=shape)
            spec = sp.fft2(Tensor(z))
            h, w = shape[-2:]
            lhs = (z ** 2).sum(axis=(-2, -1))
            rhs = h * w * (spec.amplitude.data ** 2).sum(axis=(-2, -1))
            np.testing.assert_allclose(lhs, rhs, rtol=1e-9)

    def test_matches_direct_dft_oracle(self):
        rng = np.random.default_rng(1)
        for shape in ((2, 8, 8), (1, 4, 8), (3, 5, 6), (1, 7, 7)):
            z = rng.normal(size=shape)
            spec = sp.fft2(Tensor(z))
            amp_ref, phase_ref = dft_oracle(z)
            np.testing.assert_allclose(spec.amplitude.data, amp_ref, atol=1e-9)
            # compare phases only where amplitude is well away from zero
            mask = amp_ref > 1e-9
            np.testing.assert_allclose(
                wrap(spec.phase.data[mask] - phase_ref[mask]), 0.0, atol=1e-9)

    def test_conjugate_symmetry(self):
        rng = np.random.default_rng(2)
        z = rng.normal(size=(2, 8, 8))
        spec = sp.fft2(Tensor(z))
        amp, phase = spec.amplitude.data, spec.phase.data
        h, w = 8, 8
        for a in range(h):
            for b in range(w):
                am, bm = (-a) % h, (-b) % w
                assert abs(amp[0, a, b] - amp[0, am, bm]) < 1e-9
                assert abs(wrap(phase[0, a, b] + phase[0, am, bm])) < 1e-9

    def test_batched_matches_per_sample(self):
        rng = np.random.default_rng(3)
        z = rng.normal(size=(3, 2, 8, 8))
        spec = sp.fft2(Tensor(z))
        for n in range(3):
            single = sp.fft2(Tensor(z[n]))
            np.testing.assert_allclose(spec.amplitude.data[n], single.amplitude.data,
                                       atol=1e-12)


class TestIFFT2:
    def test_round_trip(self):
        rng = np.random.default_rng(4)
        z = rng.normal(size=(3, 16, 16))
        back = sp.ifft2(sp.fft2(Tensor(z)))
        assert np.abs(back.data - z).max() < 1e-9

    def test_round_trip_non_pow2(self):
        rng = np.random.default_rng(5)
        z = rng.normal(size=(2, 6, 10))
        back = sp.ifft2(sp.fft2(Tensor(z)))
        assert np.abs(back.data - z).max() < 1e-9

    def test_dc_only_gives_constant(self):
        amp = np.zeros((1, 8, 8))
        amp[0, 0, 0] = 3.25
        out = sp.ifft2(sp.Spectrum(Tensor(amp), Tensor(np.zeros((1, 8, 8)))))
        np.testing.assert_allclose(out.data, np.full((1, 8, 8), 3.25), atol=1e-12)

    def test_asymmetric_spectrum_rejected_in_checked_mode(self):
        rng = np.random.default_rng(6)
        amp = np.abs(rng.normal(size=(1, 8, 8))) + 0.1
        phase = rng.uniform(-np.pi, np.pi, size=(1, 8, 8))
        with pytest.raises(SpectralConsistencyError):
            sp.ifft2(sp.Spectrum(Tensor(amp), Tensor(phase)))

    def test_amplitude_swap_keeps_phase_structure(self):
        a = bump_image([(8, 8, 3.0), (20, 24, 4.0)])
        b = bump_image([(16, 16, 6.0), (26, 6, 2.0)])
        spec_a = sp.fft2(Tensor(a[None]))
        spec_b = sp.fft2(Tensor(b[None]))
        recon = sp.ifft2(sp.Spectrum(spec_b.amplitude, spec_a.phase)).data[0]

        def corr(u, v):
            u = u.ravel() - u.mean()
            v = v.ravel() - v.mean()
            return float(u @ v / np.sqrt((u @ u) * (v @ v)))

        assert corr(recon, a) > corr(recon, b)


class TestAmplitudeNorm:
    def test_constant_amplitude_maps_to_zero(self):
        amp = np.stack([np.full((4, 4), 3.0), np.full((4, 4), 0.5)])
        out = sp.amplitude_instance_norm(Tensor(amp))
        assert np.abs(out.data).max() < 1e-2  # eps guard keeps it finite, near zero

    def test_zero_mean(self):
        rng = np.random.default_rng(7)
        out = sp.amplitude_instance_norm(Tensor(np.abs(rng.normal(size=(3, 8, 8)))))
        assert np.abs(out.data.mean(axis=(1, 2))).max() < 1e-9

    def test_per_channel_affine_invariance(self):
        # invariance is exact in the regime where the variance dominates eps,
        # so use amplitudes large enough that eps=1e-5 is negligible
        rng = np.random.default_rng(8)
        amp = (np.abs(rng.normal(size=(2, 8, 8))) + 0.2) * 2000.0
        scaled = amp * np.array([2.0, 0.3])[:, None, None] + np.array([150.0, -40.0])[:, None, None]
        out1 = sp.amplitude_instance_norm(Tensor(amp)).data
        out2 = sp.amplitude_instance_norm(Tensor(scaled)).data
        np.testing.assert_allclose(out1, out2, atol=1e-9)


class TestStyleGate:
    def test_zero_parameters_give_half(self):
        gate = sp.StyleGate(Tensor(np.zeros((2, 6))), Tensor(np.zeros(2)))
        rng = np.random.default_rng(9)
        chi = Tensor(np.abs(rng.normal(size=(3, 4, 4))))
        chi_n = sp.amplitude_instance_norm(chi)
        lam_n, lam_o = sp.style_gate(chi_n, chi, gate)
        assert lam_n.item() == pytest.approx(0.5, abs=1e-12)
        assert lam_o.item() == pytest.approx(0.5, abs=1e-12)

    def test_bias_saturation(self):
        gate = sp.StyleGate(Tensor(np.zeros((2, 6))), Tensor(np.array([20.0, -20.0])))
        rng = np.random.default_rng(10)
        chi = Tensor(np.abs(rng.normal(size=(3, 4, 4))))
        lam_n, lam_o = sp.style_gate(sp.amplitude_instance_norm(chi), chi, gate)
        assert lam_n.item() > 1.0 - 1e-8
        assert lam_o.item() < 1e-8

    def test_gate_weight_gradient(self):
        rng = np.random.default_rng(11)
        w = Parameter("w", rng.normal(size=(2, 4)) * 0.1)
        b = Parameter("b", rng.normal(size=2) * 0.1)
        gate = sp.StyleGate(w, b)
        chi = Tensor(np.abs(rng.normal(size=(2, 4, 4))) + 0.1)
        chi_n = sp.amplitude_instance_norm(chi)

        def build():
            lam_n, lam_o = sp.style_gate(sp.amplitude_instance_norm(chi), chi, gate)
            return T.add(T.mul(lam_n, lam_n), T.scale(lam_o, 3.0))

        err = T.finite_diff_check(build, [w, b], h=1e-5)
        assert err < 1e-3
        del chi_n


class TestFSRForward:
    def test_identity_recomposition(self):
        rng = np.random.default_rng(12)
        z = rng.normal(size=(2, 8, 8))
        spec = sp.fft2(Tensor(z))
        # forced lam_norm=0, lam_org=1: recombined amplitude is the original
        out = sp.ifft2(sp.Spectrum(T.clamp_min(spec.amplitude, 0.0), spec.phase))
        assert np.abs(out.data - z).max() < 1e-9

    def test_normalized_amplitude_shrinks_style_distance(self):
        rng = np.random.default_rng(13)
        z_a = rng.normal(size=(2, 8, 8))
        spec_a = sp.fft2(Tensor(z_a))
        # style shift: scale the amplitude spectrum, keep the phase
        z_b = sp.ifft2(sp.Spectrum(T.scale(spec_a.amplitude, 1.8), spec_a.phase)).data
        spec_b = sp.fft2(Tensor(z_b))

        def recal(spec):
            chi_n = sp.amplitude_instance_norm(spec.amplitude)
            return sp.ifft2(sp.Spectrum(T.clamp_min(chi_n, 0.0), spec.phase)).data

        d_before = np.linalg.norm(z_a - z_b)
        d_after = np.linalg.norm(recal(spec_a) - recal(spec_b))
        assert d_after < d_before

    def test_phase_untouched_where_amplitude_nonzero(self):
        rng = np.random.default_rng(14)
        z = rng.normal(size=(1, 8, 8))
        gate = sp.StyleGate(Tensor(np.zeros((2, 2))), Tensor(np.zeros(2)))
        out = sp.fsr_forward(Tensor(z), gate)
        before = sp.fft2(Tensor(z))
        after = sp.fft2(Tensor(out.data))
        mask = after.amplitude.data > 1e-9
        diff = wrap(after.phase.data[mask] - before.phase.data[mask])
        assert np.abs(diff).max() < 1e-6

    def test_batched_matches_per_sample(self):
        rng = np.random.default_rng(15)
        z = rng.normal(size=(3, 2, 8, 8))
        gate = sp.StyleGate(Tensor(rng.normal(size=(2, 4)) * 0.2),
                            Tensor(rng.normal(size=2) * 0.2))
        out = sp.fsr_forward(Tensor(z), gate)
        for n in range(3):
            single = sp.fsr_forward(Tensor(z[n]), gate)
            np.testing.assert_allclose(out.data[n], single.data, atol=1e-12)

    def test_frozen_layer_is_exact_bypass(self):
        layer = sp.FSRLayer("tap.fsr", channels=2)
        layer.frozen = True
        z = Tensor(np.random.default_rng(16).normal(size=(2, 8, 8)))
        assert layer(z) is z

    def test_full_path_gradient(self):
        rng = np.random.default_rng(17)
        z = Parameter("z", rng.normal(size=(2, 4, 4)))
        w = Parameter("w", rng.normal(size=(2, 4)) * 0.1)
        b = Parameter("b", rng.normal(size=2) * 0.1)
        gate = sp.StyleGate(w, b)
        probe = rng.normal(size=(2, 4, 4))

        def build():
            out = sp.fsr_forward(z, gate)
            return T.tsum(T.mul(out, Tensor(probe)))

        err = T.finite_diff_check(build, [z, w, b], h=1e-4)
        assert err < 1e-3

    def test_fft_ifft_gradients_alone(self):
        rng = np.random.default_rng(18)
        z = Parameter("z", rng.normal(size=(1, 4, 4)))
        probe_a = np.abs(rng.normal(size=(1, 4, 4))) + 0.5
        probe_p = rng.normal(size=(1, 4, 4)) * 0.1

        def build():
            spec = sp.fft2(z)
            # touch both outputs so each backward branch runs
            amp_term = T.tsum(T.mul(spec.amplitude, Tensor(probe_a)))
            rec = sp.ifft2(sp.Spectrum(spec.amplitude, spec.phase))
            rec_term = T.tsum(T.mul(rec, Tensor(probe_p)))
            return T.add(amp_term, rec_term)

        err = T.finite_diff_check(build, [z], h=1e-4)
        assert err < 1e-3
