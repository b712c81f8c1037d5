"""Lightweight segmentation network blocks, builder, and audits."""

from .blocks import (
    ALSSBlock,
    ALSSConfig,
    ConvBNAct,
    MSCA,
    MSCAConfig,
    SPPF,
    channel_shuffle,
    conv_bn_act,
    conv_bn_params,
    sppf,
    sppf_params,
)
from .head import (
    DFL,
    Proto,
    SegmentHead,
    SegmentHeadConfig,
    SegmentOutputs,
    assemble_instance_mask,
    prototype_combination,
)
from .network import (
    LayerSpec,
    NetworkConfig,
    build_network,
    audit_parameters,
    audit_flops,
    default_network_config,
)

__all__ = [
    "ALSSBlock",
    "ALSSConfig",
    "ConvBNAct",
    "MSCA",
    "MSCAConfig",
    "SPPF",
    "channel_shuffle",
    "conv_bn_act",
    "conv_bn_params",
    "sppf",
    "sppf_params",
    "DFL",
    "Proto",
    "SegmentHead",
    "SegmentHeadConfig",
    "SegmentOutputs",
    "assemble_instance_mask",
    "prototype_combination",
    "LayerSpec",
    "NetworkConfig",
    "build_network",
    "audit_parameters",
    "audit_flops",
    "default_network_config",
]
