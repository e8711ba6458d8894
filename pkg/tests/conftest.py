import warnings

import numpy as np
import pytest
import torch

from seqmim import synth
from seqmim.corpus import preprocess

warnings.filterwarnings("ignore", message="Converting a tensor with requires_grad")

TINY = dict(n_users=80, n_items=40, n_attrs=12, attrs_per_item=3, n_clusters=4, seq_len_min=6, seq_len_max=10)


@pytest.fixture(scope="session")
def tiny_spec():
    return synth.SynthSpec(seed=3, **TINY)


@pytest.fixture(scope="session")
def tiny_files(tmp_path_factory, tiny_spec):
    out = tmp_path_factory.mktemp("tiny_raw")
    return synth.write_files(synth.generate(tiny_spec), out, tiny_spec)


@pytest.fixture(scope="session")
def tiny_dataset(tiny_files):
    inter, attrs = tiny_files
    return preprocess(inter, attrs, k=1)


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)
    np.random.seed(0)
