"""Miniature encoder-decoder segmentation network with named feature taps.

Three resolution levels with skip connections. Style recalibration layers
sit in-line at the tapped layers, so the recalibrated features feed both
the prediction path (including skips) and the prototype readouts. The
fusion heads that project concatenated prototypes live on the model too,
because they are aggregated with the rest of the parameters.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as tt
from .errors import ContractError, DimensionError
from .prototypes import FusionHead
from .spectral import FSRLayer
from .tensor import Parameter, Tensor


@dataclass
class SegNetConfig:
    input_channels: int = 1
    class_count: int = 2
    level_channels: tuple = (8, 16, 32)
    decoder_channels: tuple = (32, 16)
    encoder_taps: tuple = ("enc2", "enc3")
    decoder_taps: tuple = ("dec1", "dec2")
    d_fused: int = 32

    def validate(self) -> None:
        if self.class_count < 2:
            raise ContractError("class_count must be >= 2")
        if len(self.level_channels) != 3 or len(self.decoder_channels) != 2:
            raise ContractError("this build is fixed at 3 levels (2 decoder stages)")
        if tuple(self.encoder_taps) != ("enc2", "enc3"):
            raise ContractError("encoder taps are fixed to the deepest two levels")
        if tuple(self.decoder_taps) != ("dec1", "dec2"):
            raise ContractError("decoder taps are fixed to the two decoder stages")
        if self.d_fused < 1:
            raise ContractError("d_fused must be positive")
        c1, _, c3 = self.level_channels
        d2, d1 = self.decoder_channels
        for shallow, deep in ((self.level_channels[1], c3), (d1, d2)):
            if self.d_fused > shallow + deep:
                raise ContractError("d_fused exceeds the concatenated prototype width")


def _kaiming_uniform(rng, shape, fan_in):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Conv2d:
    def __init__(self, prefix: str, rng, c_in: int, c_out: int, k: int = 3):
        self.padding = k // 2
        self.weight = Parameter(f"{prefix}.weight",
                                _kaiming_uniform(rng, (c_out, c_in, k, k), c_in * k * k))
        self.bias = Parameter(f"{prefix}.bias", np.zeros(c_out))

    def parameters(self):
        return [self.weight, self.bias]

    def __call__(self, x: Tensor) -> Tensor:
        return tt.conv2d(x, self.weight, self.bias, stride=1, padding=self.padding)


class ConvBlock:
    """conv3x3 -> instance norm -> leaky relu, twice."""

    def __init__(self, prefix: str, rng, c_in: int, c_out: int):
        self.conv1 = Conv2d(f"{prefix}.conv1", rng, c_in, c_out)
        self.conv2 = Conv2d(f"{prefix}.conv2", rng, c_out, c_out)

    def parameters(self):
        return self.conv1.parameters() + self.conv2.parameters()

    def __call__(self, x: Tensor) -> Tensor:
        x = tt.leaky_relu(tt.instance_norm(self.conv1(x)))
        return tt.leaky_relu(tt.instance_norm(self.conv2(x)))


class SegNet:
    """Encoder-decoder with taps at enc2, enc3, dec2, dec1.

    Resolutions: enc1/dec1 at full, enc2/dec2 at half, enc3 at quarter.
    """

    def __init__(self, config: SegNetConfig = None, seed: int = 0):
        self.config = config or SegNetConfig()
        self.config.validate()
        cfg = self.config
        rng = np.random.default_rng(seed)
        c1, c2, c3 = cfg.level_channels
        d2, d1 = cfg.decoder_channels

        self.enc1 = ConvBlock("enc1", rng, cfg.input_channels, c1)
        self.enc2 = ConvBlock("enc2", rng, c1, c2)
        self.enc3 = ConvBlock("enc3", rng, c2, c3)
        self.dec2 = ConvBlock("dec2", rng, c3 + c2, d2)
        self.dec1 = ConvBlock("dec1", rng, d2 + c1, d1)
        self.head = Conv2d("head", rng, d1, cfg.class_count, k=1)

        self.fsr = {
            "enc2": FSRLayer("enc2.fsr", c2),
            "enc3": FSRLayer("enc3.fsr", c3),
            "dec2": FSRLayer("dec2.fsr", d2),
            "dec1": FSRLayer("dec1.fsr", d1),
        }
        self.fusion = {
            "enc": FusionHead("fusion.enc", rng, c2 + c3, cfg.d_fused),
            "dec": FusionHead("fusion.dec", rng, d1 + d2, cfg.d_fused),
        }
        # tap name -> (pathway, role) used by the prototype pipeline
        self.tap_channels = {"enc2": c2, "enc3": c3, "dec2": d2, "dec1": d1}
        self.pathway_taps = {"enc": ("enc2", "enc3"), "dec": ("dec1", "dec2")}

        self.params: dict = {}
        blocks = [self.enc1, self.enc2, self.enc3, self.dec2, self.dec1, self.head]
        for block in blocks:
            for p in block.parameters():
                self._register(p)
        for name in ("enc2", "enc3", "dec2", "dec1"):
            for p in self.fsr[name].parameters():
                self._register(p)
        for name in ("enc", "dec"):
            for p in self.fusion[name].parameters():
                self._register(p)

    def _register(self, p: Parameter) -> None:
        if p.identifier in self.params:
            raise ContractError(f"duplicate parameter identifier {p.identifier!r}")
        self.params[p.identifier] = p

    # ------------------------------------------------------------------
    def forward(self, image: Tensor):
        """Returns (logits, taps); taps hold the post-recalibration features."""
        h, w = image.data.shape[-2:]
        if h % 4 or w % 4:
            raise DimensionError("spatial extents must be divisible by 4")
        x1 = self.enc1(image)
        x2 = self.fsr["enc2"](self.enc2(tt.maxpool2x(x1)))
        x3 = self.fsr["enc3"](self.enc3(tt.maxpool2x(x2)))
        u2 = self.fsr["dec2"](self.dec2(tt.concat_channels([tt.nearest_upsample2x(x3), x2])))
        u1 = self.fsr["dec1"](self.dec1(tt.concat_channels([tt.nearest_upsample2x(u2), x1])))
        logits = self.head(u1)
        taps = {"enc2": x2, "enc3": x3, "dec2": u2, "dec1": u1}
        return logits, taps

    # ------------------------------------------------------------------
    def parameters(self):
        return list(self.params.values())

    def state(self) -> dict:
        return {name: p.data.copy() for name, p in self.params.items()}

    def load_state(self, state: dict) -> None:
        if set(state) != set(self.params):
            missing = set(self.params) - set(state)
            extra = set(state) - set(self.params)
            raise ContractError(f"state mismatch; missing={sorted(missing)} extra={sorted(extra)}")
        for name, p in self.params.items():
            arr = np.asarray(state[name], dtype=p.data.dtype)
            if arr.shape != p.data.shape:
                raise DimensionError(f"shape mismatch for {name}")
            p.data = arr.copy()
            p.grad = None

    def zero_grads(self) -> None:
        for p in self.params.values():
            p.grad = None

    def set_fsr_frozen(self, frozen: bool) -> None:
        for layer in self.fsr.values():
            layer.frozen = frozen

    @property
    def fsr_frozen(self) -> bool:
        return all(layer.frozen for layer in self.fsr.values())


def parameter_count(model: SegNet) -> int:
    return sum(p.data.size for p in model.parameters())
