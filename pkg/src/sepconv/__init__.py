"""Video frame interpolation via adaptive separable convolution."""
from .errors import IntegrityError, NumericError, ParameterError, StateError
from .interpolate import Interpolator, interpolate, multi_interpolate
from .model import ModelConfig, Parameters, backward, build, forward
from .numeric import RandomStream
from .op import (DenseKernelPair, KernelField, dense_local_conv_oracle, memory_footprint,
                 outer_product_kernels, sepconv_backward_kernels, sepconv_forward)

__version__ = "0.1.0"
