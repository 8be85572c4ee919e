"""Physics-informed CNN for sEMG-driven wrist force and angle estimation with
transfer learning, plus a synthetic wrist simulator to test it on."""

__version__ = "0.1.0"
