"""
Road geometry features and dynamic feature fusion for drivable-area and
road-anomaly segmentation.
"""
from . import dfm
from . import disparity_transform
from . import features
from . import fusionnet
from . import io
from . import metrics
from . import synth
from . import tensorcore
from . import utils
from . import visualization

__version__ = '0.1.0'

__all__ = ['dfm', 'disparity_transform', 'features', 'fusionnet', 'io', 'metrics', 'synth', 'tensorcore',
           'utils', 'visualization']
