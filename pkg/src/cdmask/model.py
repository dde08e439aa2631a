"""CDMaskFormer: backbone -> change extractor -> pixel decoder -> query decoder -> detector."""
from dataclasses import asdict, dataclass, fields
from typing import Tuple

import torch
from torch import nn

from .backbone import BackboneConfig, ReferenceBackbone, pad_to_multiple, siamese_apply
from .decoder import TransformerDecoder
from .extractor import ChangeExtractor
from .head import detect
from .pixel_decoder import PixelDecoder


@dataclass
class ModelConfig:
    in_channels: int = 3
    backbone_widths: Tuple[int, ...] = (32, 64, 128, 256)
    dim: int = 128
    use_spatial_weight: bool = True
    use_channel_weight: bool = True
    dmlp_branches: int = 2
    pixel_decoder: str = "deformable"
    pixel_decoder_layers: int = 3
    deform_heads: int = 8
    deform_points: int = 4
    ffn_dim: int = 512
    num_queries: int = 5
    decoder_heads: int = 8
    decoder_structure: str = "mab3_saab"
    decoder_rounds: int = 1
    mask_mlp_layers: int = 3

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model options: {sorted(unknown)}")
        d = dict(d)
        if "backbone_widths" in d:
            d["backbone_widths"] = tuple(d["backbone_widths"])
        return cls(**d)

    def to_dict(self):
        d = asdict(self)
        d["backbone_widths"] = list(self.backbone_widths)
        return d


class CDMaskFormer(nn.Module):
    def __init__(self, config: ModelConfig = None, backbone: nn.Module = None):
        super().__init__()
        config = config or ModelConfig()
        self.config = config
        if backbone is None:
            backbone = ReferenceBackbone(BackboneConfig(widths=config.backbone_widths, in_channels=config.in_channels))
        self.backbone = backbone
        self.extractor = ChangeExtractor(
            backbone.out_channels,
            config.dim,
            use_spatial=config.use_spatial_weight,
            use_channel=config.use_channel_weight,
            branches=config.dmlp_branches,
        )
        self.pixel_decoder = PixelDecoder(
            config.dim,
            num_layers=config.pixel_decoder_layers,
            n_heads=config.deform_heads,
            n_points=config.deform_points,
            ffn_dim=config.ffn_dim,
            mode=config.pixel_decoder,
        )
        self.decoder = TransformerDecoder(
            config.dim,
            num_queries=config.num_queries,
            heads=config.decoder_heads,
            ffn_dim=config.ffn_dim,
            structure=config.decoder_structure,
            rounds=config.decoder_rounds,
            mask_layers=config.mask_mlp_layers,
        )

    def backbone_parameters(self):
        return list(self.backbone.parameters())

    def other_parameters(self):
        ids = {id(p) for p in self.backbone.parameters()}
        return [p for p in self.parameters() if id(p) not in ids]

    def forward(self, t1: torch.Tensor, t2: torch.Tensor) -> dict:
        """Returns a dict with ``predictions`` (one per prediction set), ``prototypes``,
        ``pyramids``, ``changes`` and ``refined``. The final set is ``predictions[-1]``.
        """
        pyr1, pyr2 = siamese_apply(self.backbone, t1, t2)
        changes = self.extractor(pyr1, pyr2)
        refined = self.pixel_decoder(changes)
        prototypes, predictions = self.decoder(refined)
        return {
            "predictions": predictions,
            "prototypes": prototypes,
            "pyramids": (pyr1, pyr2),
            "changes": changes,
            "refined": refined,
        }

    @torch.no_grad()
    def predict(self, t1: torch.Tensor, t2: torch.Tensor, threshold: float = 0.5):
        """Binary change maps ``(N, H, W)`` at input resolution plus the normalized maps.

        Inputs whose sides are not multiples of 32 are reflection-padded and
        the result is cropped back.
        """
        if t1.shape != t2.shape:
            raise ValueError("temporal images differ in shape")
        p1, (h, w) = pad_to_multiple(t1)
        p2, _ = pad_to_multiple(t2)
        out = self.forward(p1, p2)["predictions"][-1]
        return detect(out["pred_logits"], out["pred_masks"], out_size=p1.shape[-2:], crop=(h, w), t=threshold)
