from .checkpoint import (
    export_encoder,
    import_encoder_weights,
    load_checkpoint,
    load_state,
    read_blob,
    save_checkpoint,
)
from .core import (
    ASPP_BLOCK,
    ModelConfig,
    ParameterCount,
    SegModel,
    build_model,
    build_unet_baseline,
    count_parameters,
    forward,
)

__all__ = [
    "ASPP_BLOCK", "ModelConfig", "ParameterCount", "SegModel", "build_model", "build_unet_baseline",
    "count_parameters", "export_encoder", "forward", "import_encoder_weights", "load_checkpoint",
    "load_state", "read_blob", "save_checkpoint",
]
