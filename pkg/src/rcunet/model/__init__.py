"""Network descriptions, runnable models, checkpoints and analysis probes."""
from .arch import (
    CANONICAL_NAMES,
    RC,
    ArchSpec,
    BlockSpec,
    Conv,
    MaxPool,
    ReceptiveField,
    TransposedConv,
    all_rc,
    canonical_archs,
    conv_mp,
    count_params,
    describe,
    odd_rc,
    plain_conv,
    rc_axis_paths,
    receptive_field,
)
from .net import (
    FCLN,
    Network,
    RNNBaseline,
    UNet,
    build_model,
    bwr_forward,
    fcln_forward,
    irm,
    model_description,
    rnn_forward,
    unet_forward,
)
