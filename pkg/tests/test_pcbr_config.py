# BSD 3-Clause License

# Copyright (c) 2024, engageLively
# All rights reserved.

# Redistribution and use in source and binary forms, with or without
# modification, are permitted provided that the following conditions are met:

# 1. Redistributions of source code must retain the above copyright notice, this
#    list of conditions and the following disclaimer.

# 2. Redistributions in binary form must reproduce the above copyright notice,
#    this list of conditions and the following disclaimer in the documentation
#    and/or other materials provided with the distribution.

# 3. Neither the name of the copyright holder nor the names of its
#    contributors may be used to endorse or promote products derived from
#    this software without specific prior written permission.

# THIS SOFTWARE IS PROVIDED BY THE COPYRIGHT HOLDERS AND CONTRIBUTORS "AS IS"
# AND ANY EXPRESS OR IMPLIED WARRANTIES, INCLUDING, BUT NOT LIMITED TO, THE
# IMPLIED WARRANTIES OF MERCHANTABILITY AND FITNESS FOR A PARTICULAR PURPOSE ARE
# DISCLAIMED. IN NO EVENT SHALL THE COPYRIGHT HOLDER OR CONTRIBUTORS BE LIABLE
# FOR ANY DIRECT, INDIRECT, INCIDENTAL, SPECIAL, EXEMPLARY, OR CONSEQUENTIAL
# DAMAGES (INCLUDING, BUT NOT LIMITED TO, PROCUREMENT OF SUBSTITUTE GOODS OR
# SERVICES; LOSS OF USE, DATA, OR PROFITS; OR BUSINESS INTERRUPTION) HOWEVER
# CAUSED AND ON ANY THEORY OF LIABILITY, WHETHER IN CONTRACT, STRICT LIABILITY,
# OR TORT (INCLUDING NEGLIGENCE OR OTHERWISE) ARISING IN ANY WAY OUT OF THE USE
# OF THIS SOFTWARE, EVEN IF ADVISED OF THE POSSIBILITY OF SUCH DAMAGE.
'''
Tests for parsing, validating, canonicalizing and snapshotting configuration documents
'''

import os

import numpy as np
import pytest

from pcbr import parse_config, canonicalize, load_config, snapshot_configs, load_snapshot
from pcbr import ModelSpec, TrainSpec, SchemaException, ConfigSyntaxException
from tiny_configs import make_specs, tiny_documents

MODEL_YAML = '''
prototype_dim: 8
num_classes: 3
classifier:
  kind: prototree
  params:
    depth: 3
similarity:
  epsilon: 1e-4
'''


def _schema_error_path(document, kind):
    with pytest.raises(SchemaException) as error:
        parse_config(document, kind)
    return error.value.path


def test_empty_documents_are_filled():
    model = parse_config('', 'model')
    assert model.prototype_dim == 32
    assert model.classifier_kind == 'protopnet'
    assert model.classifier_params == {'num_prototypes_per_class': 2}
    assert model.similarity_kind == 'protopnet_log'
    assert model.add_on == [{'kind': 'conv1x1', 'out_channels': 32}, {'kind': 'sigmoid'}]
    assert model.num_prototypes == 6
    assert not model.compatibility_mode
    tree = parse_config({'classifier': {'kind': 'prototree'}}, 'model')
    assert tree.prototype_dim == 8
    assert tree.add_on[0] == {'kind': 'conv1x1', 'out_channels': 8}
    assert tree.num_prototypes == 15
    train = parse_config(None, 'train')
    assert train.optimizer['kind'] == 'adam'
    assert train.optimizer['learning_rates'] == {'backbone': 0.001, 'add_on': 0.003, 'prototypes': 0.003, 'decision': 0.01}
    assert train.projection_epoch == 10
    assert train.freeze_schedule == [{'start': 0, 'end': 20, 'groups': ['backbone', 'add_on', 'prototypes', 'decision']}]
    data = parse_config({}, 'data')
    assert data.train_set['name'] == 'synthetic_shapes'
    assert data.test_set is None
    assert data.transform[-1]['op'] == 'normalize'
    viz = parse_config({}, 'viz')
    assert viz.attribution_type == 'upsampling'
    assert viz.view_type == 'heatmap'
    assert viz.benchmark['kinds'] == ['hue_shift', 'gaussian_blur', 'gaussian_noise', 'brightness']


def test_yaml_text():
    spec = parse_config(MODEL_YAML, 'model')
    assert spec.classifier_kind == 'prototree'
    assert spec.similarity_kind == 'exp_neg_l2'
    assert spec.epsilon == 1e-4
    assert spec.num_prototypes == 7
    assert parse_config(MODEL_YAML.encode('utf-8'), 'model') == spec


def test_syntax_errors():
    with pytest.raises(ConfigSyntaxException):
        parse_config('classifier: [protopnet', 'model')
    with pytest.raises(SchemaException):
        parse_config('{}', 'nonsense')


def test_schema_errors_name_the_path():
    assert _schema_error_path({'classifier': {'kind': 'prototree', 'params': {'depth': 0}}}, 'model') == 'classifier.params.depth'
    assert _schema_error_path({'classifier': {'kind': 'forest'}}, 'model') == 'classifier.kind'
    assert _schema_error_path({'prototype_dims': 8}, 'model') == 'prototype_dims'
    assert _schema_error_path({'prototype_dim': True}, 'model') == 'prototype_dim'
    assert _schema_error_path({'prototype_dim': '8'}, 'model') == 'prototype_dim'
    assert _schema_error_path({'classifier': {'kind': 'prototree', 'params': {'depth': '9'}}}, 'model') == 'classifier.params.depth'
    assert _schema_error_path({'num_epochs': 2.0}, 'train') == 'num_epochs'
    assert _schema_error_path({'classifier': {'kind': 'prototree'}, 'similarity': {'kind': 'protopnet_log'}},
                              'model') == 'similarity.kind'
    assert _schema_error_path({'similarity': {'epsilon': 0}}, 'model') == 'similarity.epsilon'
    assert _schema_error_path({'batch_size': 0}, 'data') == 'batch_size'
    assert _schema_error_path({'transform': [{'op': 'hflip'}]}, 'data') == 'transform.0'
    assert _schema_error_path({'transform': [{'op': 'normalize'}, {'op': 'hflip'}]}, 'data') == 'transform.0.op'
    assert _schema_error_path({'train_set': {'name': 'image_folder'}}, 'data') == 'train_set.params.root'
    assert _schema_error_path({'benchmark': {'q': 1.0}}, 'viz') == 'benchmark.q'
    assert _schema_error_path({'attribution': {'type': 'smoothgrad', 'params': {'num_samples': 0}}},
                              'viz') == 'attribution.params.num_samples'
    assert _schema_error_path({'view': {'type': 'contour'}}, 'viz') == 'view.type'


def test_add_on_must_reach_prototype_dim():
    document = {'prototype_dim': 8, 'extractor': {'add_on': [{'kind': 'conv1x1', 'out_channels': 16}]}}
    assert _schema_error_path(document, 'model') == 'extractor.add_on.0.out_channels'
    document['extractor']['add_on'] = [{'kind': 'conv1x1', 'out_channels': 16}, {'kind': 'relu'},
                                       {'kind': 'conv1x1', 'out_channels': 8}, {'kind': 'sigmoid'}]
    assert len(parse_config(document, 'model').add_on) == 4


def test_training_schedule():
    assert _schema_error_path({'num_epochs': 4, 'projection_epoch': 4}, 'train') == 'projection_epoch'
    gap = {'num_epochs': 4, 'freeze_schedule': [{'start': 0, 'end': 1, 'groups': ['decision']},
                                                {'start': 2, 'end': 4, 'groups': ['backbone']}]}
    assert _schema_error_path(gap, 'train') == 'freeze_schedule.1.start'
    short = {'num_epochs': 4, 'freeze_schedule': [{'start': 0, 'end': 3, 'groups': ['decision']}]}
    assert _schema_error_path(short, 'train') == 'freeze_schedule'
    bad_group = {'num_epochs': 1, 'freeze_schedule': [{'start': 0, 'end': 1, 'groups': ['head']}]}
    assert _schema_error_path(bad_group, 'train') == 'freeze_schedule.0.groups.0'
    spec = parse_config({'num_epochs': 3, 'freeze_schedule': [
        {'start': 1, 'end': 3, 'groups': ['decision', 'prototypes']},
        {'start': 0, 'end': 1, 'groups': ['add_on']}]}, 'train')
    assert [entry['start'] for entry in spec.freeze_schedule] == [0, 1]
    assert spec.freeze_schedule[1]['groups'] == ['prototypes', 'decision']


def test_zero_epochs():
    spec = parse_config({'num_epochs': 0}, 'train')
    assert spec.projection_epoch == -1
    assert spec.freeze_schedule == []


def test_canonical_form_is_stable():
    documents = tiny_documents()
    for (kind, document) in documents.items():
        spec = parse_config(document, kind)
        (text, digest) = canonicalize(spec)
        (text_again, digest_again) = canonicalize(parse_config(text, kind))
        assert text == text_again
        assert digest == digest_again
        assert len(digest) == 64
    shuffled = dict(reversed(list(documents['model'].items())))
    assert canonicalize(parse_config(shuffled, 'model')) == canonicalize(parse_config(documents['model'], 'model'))


def _random_model_document(rng):
    prototype_dim = int(rng.integers(1, 33))
    if rng.random() < 0.5:
        classifier = {'kind': 'protopnet', 'params': {'num_prototypes_per_class': int(rng.integers(1, 5))}}
    else:
        classifier = {'kind': 'prototree', 'params': {'depth': int(rng.integers(1, 6))}}
    return {'prototype_dim': prototype_dim, 'num_classes': int(rng.integers(1, 10)), 'classifier': classifier,
            'compatibility_mode': bool(rng.random() < 0.5),
            'similarity': {'epsilon': float(rng.random() * 1e-3 + 1e-6)}}


def _random_train_document(rng):
    num_epochs = int(rng.integers(1, 13))
    cuts = sorted(set(int(cut) for cut in rng.integers(1, num_epochs + 1, 3)) | {num_epochs})
    (schedule, start) = ([], 0)
    for end in cuts:
        groups = [group for group in ['decision', 'prototypes', 'add_on', 'backbone'] if rng.random() < 0.5]
        schedule.append({'start': start, 'end': end, 'groups': groups or ['prototypes']})
        start = end
    return {
        'num_epochs': num_epochs,
        'seed': int(rng.integers(0, 2 ** 31)),
        'optimizer': {'kind': str(rng.choice(['sgd', 'adam'])), 'learning_rates': {'backbone': float(rng.random()) + 1e-4}},
        'freeze_schedule': schedule,
        'loss': {'cluster': float(rng.random()), 'separation': float(rng.random()), 'l1': float(rng.random())},
        'projection_epoch': int(rng.integers(-1, num_epochs)),
        'checkpoint_every': int(rng.integers(0, 4))
    }


def test_random_documents_survive_canonicalization():
    rng = np.random.default_rng(12)
    for _ in range(50):
        for (kind, document) in [('model', _random_model_document(rng)), ('train', _random_train_document(rng))]:
            spec = parse_config(document, kind)
            assert parse_config(canonicalize(spec)[0], kind) == spec, document


def test_defaults_are_explicit_in_the_hash():
    implicit = parse_config({'prototype_dim': 8}, 'model')
    explicit = parse_config(implicit.to_document(), 'model')
    assert canonicalize(implicit)[1] == canonicalize(explicit)[1]
    changed = implicit.replace('similarity.epsilon', 1e-3)
    assert canonicalize(changed)[1] != canonicalize(implicit)[1]
    assert isinstance(changed, ModelSpec)


def test_snapshot_round_trip(tmp_path):
    specs = make_specs()
    hashes = snapshot_configs(specs, str(tmp_path))
    assert sorted(os.listdir(tmp_path)) == ['data.yml', 'model.yml', 'training.yml', 'visualization.yml']
    with open(tmp_path / 'model.yml', 'rb') as file:
        first = file.read()
    assert snapshot_configs(list(specs.values()), str(tmp_path)) == hashes
    with open(tmp_path / 'model.yml', 'rb') as file:
        assert file.read() == first
    assert load_snapshot(str(tmp_path)) == specs
    assert isinstance(load_config(str(tmp_path / 'training.yml'), 'train'), TrainSpec)
    with pytest.raises(SchemaException):
        snapshot_configs({'model': specs['model']}, str(tmp_path / 'partial'))
