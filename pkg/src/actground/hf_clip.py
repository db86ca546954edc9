"""Adapter that runs Hugging Face CLIP checkpoints through the numpy ViT.

The vision weights are copied into :class:`ViTWeights` once; pixel
normalization is folded into the patch embedding so frames go through the
same ``x / 255 - 0.5`` path as the toy backbone. Text goes through the
original torch text tower.
"""
from __future__ import annotations

import numpy as np

from .backbone import (
    BackboneDescriptor,
    BlockWeights,
    InvalidInputError,
    LayerNormParams,
    TextEmbedding,
    ViTBackbone,
    ViTWeights,
)

CLIP_MEAN = (0.48145466, 0.4578275, 0.40821073)
CLIP_STD = (0.26862954, 0.26130258, 0.27577711)


def _np(t) -> np.ndarray:
    return t.detach().to("cpu").double().numpy()


def _ln(mod) -> LayerNormParams:
    return LayerNormParams(_np(mod.weight), _np(mod.bias))


def _linear(mod):
    w = _np(mod.weight).T
    b = _np(mod.bias) if mod.bias is not None else np.zeros(w.shape[1])
    return w, b


def vision_weights_from_hf(model, mean=CLIP_MEAN, std=CLIP_STD) -> tuple[BackboneDescriptor, ViTWeights]:
    """Convert a ``transformers.CLIPModel`` vision tower."""
    vcfg = model.config.vision_config
    if getattr(vcfg, "hidden_act", "quick_gelu") != "quick_gelu":
        raise InvalidInputError(f"only quick_gelu CLIP towers are supported, got {vcfg.hidden_act}")
    vt = model.vision_model
    p = vcfg.patch_size
    grid = vcfg.image_size // p
    conv = _np(vt.embeddings.patch_embedding.weight)  # (d, 3, p, p)
    mean = np.asarray(mean)[None, :, None, None]
    std = np.asarray(std)[None, :, None, None]
    scaled = conv / std
    patch_bias = (scaled * (0.5 - mean)).sum(axis=(1, 2, 3))
    patch_embed = scaled.transpose(2, 3, 1, 0).reshape(p * p * 3, -1)
    pos = _np(vt.embeddings.position_embedding.weight).copy()
    pos[1:] += patch_bias
    blocks = []
    for layer in vt.encoder.layers:
        att = layer.self_attn
        w_q, b_q = _linear(att.q_proj)
        w_k, b_k = _linear(att.k_proj)
        w_v, b_v = _linear(att.v_proj)
        w_o, b_o = _linear(att.out_proj)
        w_fc1, b_fc1 = _linear(layer.mlp.fc1)
        w_fc2, b_fc2 = _linear(layer.mlp.fc2)
        blocks.append(
            BlockWeights(
                _ln(layer.layer_norm1), w_q, b_q, w_k, b_k, w_v, b_v, w_o, b_o,
                _ln(layer.layer_norm2), w_fc1, b_fc1, w_fc2, b_fc2,
            )
        )
    proj = _np(model.visual_projection.weight).T
    d = vcfg.hidden_size
    desc = BackboneDescriptor(
        layer_count=len(blocks),
        embed_dim=d,
        head_count=vcfg.num_attention_heads,
        head_dim=d // vcfg.num_attention_heads,
        patch_grid=(grid, grid),
        patch_size=p,
        native_frames=1,
        joint_dim=proj.shape[1],
        mlp_dim=vcfg.intermediate_size,
        weight_source=getattr(model.config, "_name_or_path", None) or "hf-clip",
    )
    weights = ViTWeights(
        patch_embed=patch_embed,
        class_embedding=_np(vt.embeddings.class_embedding),
        pos_embedding=pos,
        ln_pre=_ln(vt.pre_layrnorm),
        blocks=tuple(blocks),
        ln_post=_ln(vt.post_layernorm),
        proj=proj,
    )
    return desc, weights


class HFClipBackbone(ViTBackbone):
    def __init__(self, model, tokenizer=None):
        desc, weights = vision_weights_from_hf(model)
        super().__init__(desc, weights)
        self.model = model
        self.tokenizer = tokenizer

    @classmethod
    def from_pretrained(cls, name: str) -> "HFClipBackbone":
        from transformers import CLIPModel, CLIPTokenizer

        model = CLIPModel.from_pretrained(name).eval()
        return cls(model, CLIPTokenizer.from_pretrained(name))

    def encode_text(self, prompt: str) -> TextEmbedding:
        if not isinstance(prompt, str) or not prompt:
            raise InvalidInputError("prompt must be a non-empty string")
        if self.tokenizer is None:
            raise InvalidInputError("this CLIP backbone has no tokenizer attached")
        import torch

        tokens = self.tokenizer([prompt], padding=True, return_tensors="pt")
        with torch.no_grad():
            feats = self.model.get_text_features(**tokens)
        if not isinstance(feats, torch.Tensor):
            feats = feats.pooler_output
        return TextEmbedding(_np(feats[0]), prompt)
