#
# conftest.py
import sys
from os.path import dirname as d
from os.path import abspath
root_dir = d(d(abspath(__file__)))
sys.path.append(root_dir)
sys.path.append(f'{root_dir}/src')
sys.path.append(f'{root_dir}/tests')

import json
import os

import numpy as np
import pytest
import torch

from pcbr import init_repro, build_model, load_dataset, TransformPipeline
from tiny_configs import make_specs
import generate_legacy_fixtures


@pytest.fixture
def test_root():
    return root_dir


@pytest.fixture
def tiny_specs():
    return make_specs()


@pytest.fixture
def tree_specs():
    return make_specs('prototree')


@pytest.fixture
def tiny_model(tiny_specs):
    return build_model(tiny_specs['model'], init_repro(3).stream('init'))


@pytest.fixture
def tree_model(tree_specs):
    return build_model(tree_specs['model'], init_repro(3).stream('init'))


@pytest.fixture
def tiny_dataset(tiny_specs):
    return load_dataset(tiny_specs['data'])


@pytest.fixture
def tiny_transform(tiny_specs):
    return TransformPipeline(tiny_specs['data'].transform)


@pytest.fixture(scope='session')
def legacy_fixtures(tmp_path_factory):
    return generate_legacy_fixtures.write_fixtures(str(tmp_path_factory.mktemp('legacy')))


def _dense(tensor, dtype):
    value = torch.zeros(tensor['shape'], dtype=dtype)
    for entry in tensor['entries']:
        value[tuple(entry[:-1])] = entry[-1]
    return value


@pytest.fixture(scope='session')
def shipped_legacy_fixtures(tmp_path_factory):
    '''
    The hand-built legacy files in tests/legacy, written out as torch files,
    with their inputs and reference outputs
    '''
    directory = tmp_path_factory.mktemp('shipped_legacy')
    fixtures = {}
    for source_format in ['legacy_protopnet', 'legacy_prototree']:
        with open(os.path.join(root_dir, 'tests', 'legacy', f'{source_format}.json')) as file:
            document = json.load(file)
        path = str(directory / f'{source_format}.pth')
        torch.save({key: _dense(tensor, torch.float32) for (key, tensor) in document['parameters'].items()}, path)
        fixtures[source_format] = {'path': path, 'inputs': _dense(document['inputs'], torch.float64),
                                   'expected': np.array(document['expected'])}
    return fixtures
