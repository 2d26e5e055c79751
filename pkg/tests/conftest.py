import os

import numpy as np
import pytest

from relubab import fixtures
from relubab.model import Network, load_network, load_property


def rand_net(rng, sizes, bias=True):
    ws, bs = [], []
    for a, b in zip(sizes[:-1], sizes[1:]):
        ws.append(rng.uniform(-1, 1, (b, a)) / np.sqrt(a))
        bs.append(rng.uniform(-0.5, 0.5, b) if bias else np.zeros(b))
    return Network.from_weights(ws, bs)


def rand_box(rng, d, width=1.0):
    c = rng.uniform(-1, 1, d)
    e = rng.uniform(0.05, width, d)
    return c - e, c + e


@pytest.fixture
def twin_relu():
    return load_network(fixtures.path("twin_relu", "net")), load_property(fixtures.path("twin_relu", "prop"))


@pytest.fixture
def shifted_abs():
    return load_network(fixtures.path("shifted_abs", "net")), load_property(fixtures.path("shifted_abs", "prop"))


@pytest.fixture(scope="session")
def corpus_dir(tmp_path_factory):
    """The seeded 100-instance corpus with exact verdicts (generated once per session).

    Set RELUBAB_CORPUS to an existing corpus directory to skip generation.
    """
    pre = os.environ.get("RELUBAB_CORPUS")
    if pre and os.path.exists(os.path.join(pre, "manifest.json")):
        return pre
    from relubab.oracle import gen_instances, write_corpus

    d = tmp_path_factory.mktemp("corpus")
    write_corpus(gen_instances(0, 100), d, seed=0)
    return str(d)
