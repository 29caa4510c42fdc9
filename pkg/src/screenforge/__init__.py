"""screenforge: a desk-scale lung-screening data platform.

Ingests heterogeneous screening-program records, de-identifies them,
routes CT studies through an internal PACS, drives the reading workflow,
and exports ML-ready tabular datasets with provenance and outlier flags.
"""

__version__ = "0.1.0"
