import numpy as np
import pytest

from fedghn.archgraph import preset
from fedghn.data import Shard, synth_classify, train_test_split
from fedghn.federation import ClientState


@pytest.fixture(scope="session")
def small_graph():
    return preset("small4", 0.125, 10, (16, 16), 3)


@pytest.fixture(scope="session")
def tiny_data():
    full = synth_classify(200, 10, shape=(3, 16, 16), margin=1.0, seed=11)
    return train_test_split(full, 60, seed=5)


@pytest.fixture
def make_clients(small_graph, tiny_data):
    """Factory: C disjoint clients over the shared tiny dataset."""
    train, test = tiny_data

    def build(count: int) -> list[ClientState]:
        per_tr = train.n // count
        per_te = test.n // count
        out = []
        for cid in range(count):
            tr = Shard(train, np.arange(cid * per_tr, (cid + 1) * per_tr))
            te = Shard(test, np.arange(cid * per_te, (cid + 1) * per_te))
            out.append(ClientState(cid, small_graph, tr, te))
        return out

    return build
