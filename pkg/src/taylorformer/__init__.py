"""Taylor-expanded linear attention, deformable patch embedding and a multi-branch restoration backbone."""
from .attention import (AttentionConfig, QkvTriple, dense_attention_map, phi_p, softmax_attention_oracle,
                        tmsa_grad, tmsa_linear, tmsa_pp_full, tmsa_quadratic_oracle)
from .backbone import ModelConfig, backbone_forward, count_params, init_params
from .embedding import DeformableEmbedConfig, DsdcnWeights, dsdcn_forward, multi_scale_patch_embed

__version__ = "0.1.0"
