"""The full trainable model: visual encoder, text encoder, fusion, class centers."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .encoders import EncoderConfig, TextEncoder, TokenMatrix, VisualEncoder, pool
from .fusion import Fusion, FusionConfig
from .loss import ArcFaceParams
from .tensor import Tensor

TEXT_MODES = ("none", "brief", "detail", "ocr_brief", "ocr_detail")
TEXT_MODE_PROMPTS = {
    "none": (),
    "brief": ("brief",),
    "detail": ("detail",),
    "ocr_brief": ("ocr", "brief"),
    "ocr_detail": ("ocr", "detail"),
}


# One seed stream per component, so a component's initial values do not
# depend on which other components exist (text_mode=none has no text encoder).
STREAM_VISUAL, STREAM_TEXT, STREAM_FUSION, STREAM_ARCFACE = range(4)


class LogoModel:
    """Parameter container plus the training and inference forward paths."""

    def __init__(self, visual_cfg: EncoderConfig, text_cfg: EncoderConfig, fusion_cfg: FusionConfig,
                 num_classes: int, scale: float, margin: float, seed: int,
                 vocab: dict[str, int] | None = None):
        self.visual_cfg, self.text_cfg, self.fusion_cfg = visual_cfg, text_cfg, fusion_cfg
        self.vocab = dict(vocab or {})
        self.visual = VisualEncoder(visual_cfg, np.random.default_rng([seed, STREAM_VISUAL]))
        self.text = None
        if text_cfg.vocab_size:
            self.text = TextEncoder(text_cfg, np.random.default_rng([seed, STREAM_TEXT]))
        self.fusion = Fusion(fusion_cfg, np.random.default_rng([seed, STREAM_FUSION]))
        self.arcface = ArcFaceParams.init(np.random.default_rng([seed, STREAM_ARCFACE]), num_classes,
                                          visual_cfg.embed_dim, scale, margin)

    def named_parameters(self) -> dict[str, Tensor]:
        out = dict(self.visual.named_parameters())
        if self.text is not None:
            out.update(self.text.named_parameters())
        out.update(self.fusion.named_parameters())
        out["arcface.centers"] = self.arcface.centers
        return out

    def visual_tokens(self, sources: np.ndarray) -> Tensor:
        return self.visual.forward(sources)

    def embed(self, sources: np.ndarray) -> Tensor:
        """Text-free embedding ``pool(E_v(x))`` for a batch of sources, ``[B, C]``."""
        return pool(TokenMatrix(self.visual_tokens(sources)))

    def fused(self, sources: np.ndarray, ids: np.ndarray, mask: np.ndarray,
              weights_out: list | None = None) -> Tensor:
        v = self.visual_tokens(sources)
        text = self.text.forward(ids, mask)
        return self.fusion(v, text, weights_out)
