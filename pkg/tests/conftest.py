import pytest

from mil_anomaly.corpus import load_manifest
from mil_anomaly.synth import SynthSpec, generate


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """8-dim corpus, 6+6 videos, 8 segments: quick enough for many short trainings."""
    root = tmp_path_factory.mktemp("small_corpus")
    spec = SynthSpec(dim=8, n_videos_normal=6, n_videos_anom=6, n_segments=8, anomalous_segments=(1, 3),
                     separation=4.0, tta_variants=2, seed=5)
    return load_manifest(generate(spec, str(root)))
