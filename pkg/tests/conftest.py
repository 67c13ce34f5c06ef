import time
from dataclasses import dataclass, field

import pytest

from dsrv import cae, dataio, evalmetrics as em, pipeline as pl
from dsrv import tensornet as tn

SEEDS = (0, 1, 2, 3, 4)
# desk-scale schedule shared by every trained-model test
EPOCHS = 30
BATCH = 16


@pytest.fixture(scope="session")
def vips_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("vips")
    dataio.synth_dataset(dataio.vips_spec(seed=0), out)
    return out


@pytest.fixture(scope="session")
def vips(vips_dir):
    return dataio.load_manifest(vips_dir / "manifest.csv")


@pytest.fixture(scope="session")
def heuristic_set(vips):
    return em.EmbeddingSet.from_vectors(pl.heuristic_vectors(vips.records), vips)


@pytest.fixture(scope="session")
def train_corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("train")
    spec = dataio.SynthSpec(n_per_class=6, imitators=3, seed=100, mode="train")
    return dataio.synth_dataset(spec, out)


@pytest.fixture(scope="session")
def spec_cache(tmp_path_factory):
    return tmp_path_factory.mktemp("spectrograms")


@dataclass
class ModelZoo:
    """Lazily trained CAE and CAE-SDL replicas shared across test modules."""
    corpus: dataio.DatasetManifest
    evaluation: dataio.DatasetManifest
    cache: object
    models: dict = field(default_factory=dict)
    seconds: dict = field(default_factory=dict)
    sets: dict = field(default_factory=dict)

    def trained(self, conditioning: str, seed: int) -> cae.TrainedModel:
        key = (conditioning, seed)
        if key not in self.models:
            t0 = time.perf_counter()
            data, norm = pl.training_data(self.corpus, conditioning, self.cache)
            model = cae.build_model(cae.ModelConfig.preset("cae", conditioning=conditioning), seed=seed)
            self.models[key] = cae.train(model, data, tn.TrainSchedule(max_epochs=EPOCHS), seed, norm,
                                         batch_size=BATCH)
            self.seconds[key] = time.perf_counter() - t0
        return self.models[key]

    def embeddings(self, conditioning: str, seed: int) -> em.EmbeddingSet:
        key = (conditioning, seed)
        if key not in self.sets:
            vectors = pl.embed_records(self.trained(conditioning, seed), self.evaluation.records, self.cache)
            self.sets[key] = em.EmbeddingSet.from_vectors(vectors, self.evaluation)
        return self.sets[key]


@pytest.fixture(scope="session")
def zoo(train_corpus, vips, spec_cache):
    return ModelZoo(train_corpus, vips, spec_cache)


# one line per acceptance criterion, echoed after the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
