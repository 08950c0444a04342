"""Desk-scale single-anchor near-field localization simulator for tunnels.

Submodules:

* ``scene``     geometry: tunnel, arrays, panels, trajectories, frames
* ``raygen``    image-method ground-truth path generation
* ``bounds``    single-reflector validity bounds and their exact oracle
* ``channel``   pilot-grid channel tensor synthesis and observation
* ``estimate``  tensor decomposition and per-path parameter extraction
* ``track``     variable-dimension EKF with gated NN association
* ``baseline``  snapshot LoS-tuple positioning baseline
* ``scenario``  scenario assembly and TOML loading
* ``pipeline``  per-epoch composition of the above
* ``harness``   Monte-Carlo runs, metrics, result files
"""

__version__ = "0.1.0"

from .errors import ConfigError, NumericalError

__all__ = ["ConfigError", "NumericalError", "__version__"]
