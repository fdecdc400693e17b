from .autograd import Tensor
from .nets import (
    ArchitectureDescriptor,
    FeatureMap,
    ModelParams,
    bind_for_training,
    decode_mask,
    encode_frame_mask,
    encode_visual,
    init_parameters,
)
