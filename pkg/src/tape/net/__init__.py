from .attention import (AttentionPool, AveragePool, MRSFFBlock, MRSFFPair, MultiRefWindowCrossAttention,
                        RelativePositionBias, Swin3DBlock, Swin3DCrossPair, WindowSelfAttention3D)
from .model import (NetConfig, PatchExpand, PatchMerge, ReferenceExtractor, TapeNet, build_model,
                    pixel_shuffle, restore_window, zero_fusion_outputs, zero_output_conv)
from .windows import cyclic_shift, shift_attention_mask, window_partition, window_reverse
