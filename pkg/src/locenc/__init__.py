"""Location encoders for geographic coordinates, a small benchmark harness and
geographic-bias scoring.

A location encoder is ``Enc(x) = NN(PE(x))``: a position encoder ``PE`` maps
a (lon, lat) point to a feature vector and a small trainable network ``NN``
maps that to an embedding.
"""
from . import encoders, geo, geobias, nn
from .encoders import KINDS, EncoderSpec, encode, encode_position
from .errors import LocencError
from .geo import EARTH_RADIUS_KM, LocationDeg, haversine_km

__version__ = "0.1.0"
