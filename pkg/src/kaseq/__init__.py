"""Knowledge amalgamation for transformer-based set-prediction detectors.

Several frozen teachers, each specialized on a disjoint category subset of
one detection dataset, are amalgamated into a single multi-task student via
sequence-level supervision on concatenated (optionally compressed) token
sequences and task-level supervision through Hungarian-matched soft targets.
"""

__version__ = "0.1.0"
