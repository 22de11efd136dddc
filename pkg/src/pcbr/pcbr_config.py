'''
The four configuration documents (model, data, training, visualization) that
parametrize every other part of the framework.  A document is parsed from YAML,
validated against the field tables below, default-filled so that every default
is explicit, and wrapped in a ConfigSpec.  The canonical form of a spec is the
YAML dump of its filled document with sorted keys; its hash is the SHA-256 of
those bytes.
'''

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

import copy
import logging
import os
import re

import yaml

from pcbr.pcbr_utils import PCBR_PROTOPNET, PCBR_PROTOTREE, PCBR_CLASSIFIER_KINDS
from pcbr.pcbr_utils import PCBR_PROTOPNET_LOG, PCBR_EXP_NEG_L2, PCBR_SIMILARITY_KINDS
from pcbr.pcbr_utils import PCBR_ADD_ON_KINDS, PCBR_PARAM_GROUPS, PCBR_ATTRIBUTION_TYPES, PCBR_VIEW_TYPES
from pcbr.pcbr_utils import PCBR_PERTURBATION_KINDS, PCBR_SNAPSHOT_FILES, PCBR_CONFIG_KINDS
from pcbr.pcbr_utils import SchemaException, ConfigSyntaxException, sha256_hex

_IDENTIFIER = re.compile(r'[A-Za-z_][A-Za-z0-9_.\-]*')

'''
Head-specific classifier parameters: name -> default
'''
PCBR_CLASSIFIER_PARAMS = {
    PCBR_PROTOPNET: {'num_prototypes_per_class': 2},
    PCBR_PROTOTREE: {'depth': 4}
}

'''
The similarity each head uses unless the document says otherwise.  These are the
similarities of the legacy architectures that compatibility mode replicates.
'''
PCBR_DEFAULT_SIMILARITY = {
    PCBR_PROTOPNET: PCBR_PROTOPNET_LOG,
    PCBR_PROTOTREE: PCBR_EXP_NEG_L2
}

'''
The default latent width per head.  Trees route on exp(-d2), which needs
small squared distances between sigmoid latents and prototypes in [0, 1]^D.
'''
PCBR_DEFAULT_PROTOTYPE_DIM = {
    PCBR_PROTOPNET: 32,
    PCBR_PROTOTREE: 8
}

'''
Default learning rates of the optimizer groups
'''
PCBR_DEFAULT_LEARNING_RATES = {
    'backbone': 0.001,
    'add_on': 0.003,
    'prototypes': 0.003,
    'decision': 0.01
}

'''
Attribution-specific parameters: type -> {name: default}
'''
PCBR_ATTRIBUTION_PARAMS = {
    'upsampling': {},
    'backprop': {},
    'prp': {'stabilizer': 1e-9},
    'smoothgrad': {'num_samples': 10, 'noise_ratio': 0.2},
    'randgrads': {'seed': 0}
}

'''
Parameters of the transform ops: op -> {name: default}.  None marks a required parameter.
'''
PCBR_TRANSFORM_PARAMS = {
    'resize': {'size': 32},
    'hflip': {'p': 0.5},
    'random_shift': {'max_shift': 2},
    'brightness_jitter': {'magnitude': 0.1},
    'normalize': {'mean': [0.5, 0.5, 0.5], 'std': [0.25, 0.25, 0.25]}
}

'''
Parameters of the built-in datasets: name -> {name: default}.  None marks a required parameter.
Datasets registered at runtime without an entry here have their params passed through unchecked.
'''
PCBR_DATASET_PARAMS = {
    'synthetic_shapes': {'n': 300, 'image_size': 32, 'seed': 7},
    'image_folder': {'root': None, 'split': None, 'image_size': 32}
}

PCBR_DEFAULT_MAGNITUDES = {
    'hue_shift': 72.0,
    'gaussian_blur': 3.0,
    'gaussian_noise': 0.1,
    'brightness': 0.3
}


def _join(path, key):
    return f'{path}.{key}' if path else str(key)


def _mapping(value, path, allowed):
    # A mapping with no keys outside allowed.  None is the empty mapping
    if value is None:
        return {}
    if not isinstance(value, dict):
        raise SchemaException(path or '<document>', f'must be a mapping, not {type(value).__name__}')
    unknown = sorted([str(key) for key in value.keys() if key not in allowed])
    if len(unknown) > 0:
        raise SchemaException(_join(path, unknown[0]), f'unknown key; allowed keys are {sorted(allowed)}')
    return value


def _int(value, path, minimum=None, maximum=None):
    # bool is a subclass of int; a boolean where a count is expected is an error
    if isinstance(value, bool) or not isinstance(value, int):
        raise SchemaException(path, f'must be an integer, not {type(value).__name__} {value!r}')
    if minimum is not None and value < minimum:
        raise SchemaException(path, f'must be >= {minimum}, got {value}')
    if maximum is not None and value > maximum:
        raise SchemaException(path, f'must be <= {maximum}, got {value}')
    return value


def _float(value, path, minimum=None, maximum=None, strict_minimum=False):
    # YAML reads 1e-4 (no decimal point) as a string, so numeric strings are converted
    if isinstance(value, bool):
        raise SchemaException(path, 'must be a number, not bool')
    if isinstance(value, str):
        try:
            value = float(value)
        except ValueError:
            raise SchemaException(path, f'must be a number, not {value!r}')
    if not isinstance(value, (int, float)):
        raise SchemaException(path, f'must be a number, not {type(value).__name__}')
    value = float(value)
    if value != value or value in (float('inf'), float('-inf')):
        raise SchemaException(path, 'must be finite')
    if minimum is not None:
        if (strict_minimum and value <= minimum) or value < minimum:
            relation = '>' if strict_minimum else '>='
            raise SchemaException(path, f'must be {relation} {minimum}, got {value}')
    if maximum is not None and value > maximum:
        raise SchemaException(path, f'must be <= {maximum}, got {value}')
    return value


def _bool(value, path):
    if not isinstance(value, bool):
        raise SchemaException(path, f'must be true or false, not {value!r}')
    return value


def _choice(value, path, choices):
    if not isinstance(value, str) or value not in choices:
        raise SchemaException(path, f'must be one of {choices}, not {value!r}')
    return value


def _identifier(value, path):
    if not isinstance(value, str) or _IDENTIFIER.fullmatch(value) is None:
        raise SchemaException(path, f'must be an identifier, not {value!r}')
    return value


def _optional_str(value, path):
    if value is None:
        return None
    if not isinstance(value, str):
        raise SchemaException(path, f'must be a string or null, not {type(value).__name__}')
    return value


def _float_list(value, path, length, positive=False):
    if not isinstance(value, list) or len(value) != length:
        raise SchemaException(path, f'must be a list of {length} numbers')
    return [_float(item, _join(path, i), minimum=0.0 if positive else None, strict_minimum=positive)
            for (i, item) in enumerate(value)]


def _fill_params(value, path, defaults, checkers):
    # Fill a flat parameter map against a table of defaults.  checkers maps a
    # parameter name to a function (value, path) -> checked value
    params = _mapping(value, path, list(defaults.keys()))
    result = {}
    for (name, default) in defaults.items():
        item_path = _join(path, name)
        if name not in params and default is None and name not in checkers.get('__optional__', ()):
            raise SchemaException(item_path, 'is required')
        item = params.get(name, copy.deepcopy(default))
        checker = checkers.get(name)
        result[name] = checker(item, item_path) if checker is not None else item
    return result


'''
Model documents
'''


def _fill_add_on(value, path, prototype_dim):
    if value is None:
        value = [{'kind': 'conv1x1', 'out_channels': prototype_dim}, {'kind': 'sigmoid'}]
    if not isinstance(value, list):
        raise SchemaException(path, f'must be a list of layer descriptors, not {type(value).__name__}')
    result = []
    last_conv = None
    for (i, layer) in enumerate(value):
        layer_path = _join(path, i)
        layer = _mapping(layer, layer_path, ['kind', 'out_channels'])
        kind = _choice(layer.get('kind'), _join(layer_path, 'kind'), PCBR_ADD_ON_KINDS)
        if kind == 'conv1x1':
            if 'out_channels' not in layer:
                raise SchemaException(_join(layer_path, 'out_channels'), 'is required for conv1x1')
            channels = _int(layer['out_channels'], _join(layer_path, 'out_channels'), minimum=1)
            result.append({'kind': kind, 'out_channels': channels})
            last_conv = i
        else:
            if 'out_channels' in layer:
                raise SchemaException(_join(layer_path, 'out_channels'), f'not a parameter of {kind}')
            result.append({'kind': kind})
    if last_conv is not None and result[last_conv]['out_channels'] != prototype_dim:
        raise SchemaException(_join(_join(path, last_conv), 'out_channels'),
                              f'last add_on output channels {result[last_conv]["out_channels"]} != prototype_dim {prototype_dim}')
    return result


def fill_model_document(document):
    '''
    Validate and default-fill a model document.
    Arguments:
        document: the parsed document (a dictionary, or None for an empty document)
    Returns:
        A new, fully-filled dictionary
    Raises:
        SchemaException naming the offending path
    '''
    doc = _mapping(document, '', ['extractor', 'classifier', 'similarity', 'compatibility_mode',
                                  'prototype_dim', 'num_classes'])
    classifier = _mapping(doc.get('classifier'), 'classifier', ['kind', 'params'])
    kind = _choice(classifier.get('kind', PCBR_PROTOPNET), 'classifier.kind', PCBR_CLASSIFIER_KINDS)
    prototype_dim = _int(doc.get('prototype_dim', PCBR_DEFAULT_PROTOTYPE_DIM[kind]), 'prototype_dim', minimum=1)
    num_classes = _int(doc.get('num_classes', 3), 'num_classes', minimum=1)

    extractor = _mapping(doc.get('extractor'), 'extractor', ['backbone', 'add_on'])
    backbone = _mapping(extractor.get('backbone'), 'extractor.backbone', ['arch', 'layer', 'pretrained_weights'])
    filled_backbone = {
        'arch': _identifier(backbone.get('arch', 'small_cnn'), 'extractor.backbone.arch'),
        'layer': _identifier(backbone.get('layer', 'block4'), 'extractor.backbone.layer'),
        'pretrained_weights': _optional_str(backbone.get('pretrained_weights'), 'extractor.backbone.pretrained_weights')
    }
    add_on = _fill_add_on(extractor.get('add_on'), 'extractor.add_on', prototype_dim)

    positive = lambda value, path: _int(value, path, minimum=1)
    params = _fill_params(classifier.get('params'), 'classifier.params', PCBR_CLASSIFIER_PARAMS[kind],
                          {name: positive for name in PCBR_CLASSIFIER_PARAMS[kind]})

    similarity = _mapping(doc.get('similarity'), 'similarity', ['kind', 'epsilon'])
    similarity_kind = _choice(similarity.get('kind', PCBR_DEFAULT_SIMILARITY[kind]), 'similarity.kind',
                              PCBR_SIMILARITY_KINDS)
    if kind == PCBR_PROTOTREE and similarity_kind != PCBR_EXP_NEG_L2:
        # tree routing probabilities must lie in [0, 1]
        raise SchemaException('similarity.kind', f'{kind} requires {PCBR_EXP_NEG_L2}')
    epsilon = _float(similarity.get('epsilon', 1e-4), 'similarity.epsilon', minimum=0.0, strict_minimum=True)

    return {
        'extractor': {'backbone': filled_backbone, 'add_on': add_on},
        'classifier': {'kind': kind, 'params': params},
        'similarity': {'kind': similarity_kind, 'epsilon': epsilon},
        'compatibility_mode': _bool(doc.get('compatibility_mode', False), 'compatibility_mode'),
        'prototype_dim': prototype_dim,
        'num_classes': num_classes
    }


'''
Data documents
'''


def _fill_dataset(value, path, default):
    if value is None:
        if default is None:
            return None
        value = default
    dataset = _mapping(value, path, ['name', 'params'])
    name = _identifier(dataset.get('name', 'synthetic_shapes'), _join(path, 'name'))
    params_path = _join(path, 'params')
    if name not in PCBR_DATASET_PARAMS:
        params = _mapping(dataset.get('params'), params_path, list((dataset.get('params') or {}).keys()))
        return {'name': name, 'params': copy.deepcopy(params)}
    if name == 'synthetic_shapes':
        checkers = {
            'n': lambda v, p: _int(v, p, minimum=1),
            'image_size': lambda v, p: _int(v, p, minimum=8),
            'seed': lambda v, p: _int(v, p, minimum=0)
        }
    else:
        checkers = {
            'root': lambda v, p: _optional_str(v, p),
            'split': _optional_str,
            'image_size': lambda v, p: _int(v, p, minimum=8),
            '__optional__': ('split',)
        }
    params = _fill_params(dataset.get('params'), params_path, PCBR_DATASET_PARAMS[name], checkers)
    if name == 'image_folder' and params['root'] is None:
        raise SchemaException(_join(params_path, 'root'), 'is required')
    return {'name': name, 'params': params}


def _fill_transform(value, path):
    if value is None:
        value = [{'op': 'hflip', 'p': 0.5}, {'op': 'normalize'}]
    if not isinstance(value, list) or len(value) == 0:
        raise SchemaException(path, 'must be a nonempty list of preprocessing ops')
    checkers = {
        'size': lambda v, p: _int(v, p, minimum=1),
        'p': lambda v, p: _float(v, p, minimum=0.0, maximum=1.0),
        'max_shift': lambda v, p: _int(v, p, minimum=0),
        'magnitude': lambda v, p: _float(v, p, minimum=0.0),
        'mean': lambda v, p: _float_list(v, p, 3),
        'std': lambda v, p: _float_list(v, p, 3, positive=True)
    }
    result = []
    for (i, op) in enumerate(value):
        op_path = _join(path, i)
        if not isinstance(op, dict):
            raise SchemaException(op_path, 'must be a mapping')
        name = _choice(op.get('op'), _join(op_path, 'op'), list(PCBR_TRANSFORM_PARAMS.keys()))
        params = {key: item for (key, item) in op.items() if key != 'op'}
        filled = _fill_params(params, op_path, PCBR_TRANSFORM_PARAMS[name], checkers)
        if name == 'normalize' and i != len(value) - 1:
            raise SchemaException(_join(op_path, 'op'), 'normalize must be the last op')
        result.append({'op': name, **filled})
    if result[-1]['op'] != 'normalize':
        raise SchemaException(_join(path, len(value) - 1), 'the transform list must end with a normalize op')
    return result


def fill_data_document(document):
    '''
    Validate and default-fill a data document.  See fill_model_document
    '''
    doc = _mapping(document, '', ['train_set', 'test_set', 'transform', 'batch_size', 'eval_batch_size',
                                  'num_classes'])
    return {
        'train_set': _fill_dataset(doc.get('train_set'), 'train_set', {}),
        'test_set': _fill_dataset(doc.get('test_set'), 'test_set', None),
        'transform': _fill_transform(doc.get('transform'), 'transform'),
        'batch_size': _int(doc.get('batch_size', 32), 'batch_size', minimum=1),
        'eval_batch_size': _int(doc.get('eval_batch_size', 64), 'eval_batch_size', minimum=1),
        'num_classes': _int(doc.get('num_classes', 3), 'num_classes', minimum=1)
    }


'''
Training documents
'''


def _fill_groups(value, path):
    if not isinstance(value, list) or len(value) == 0:
        raise SchemaException(path, f'must be a nonempty list of groups from {PCBR_PARAM_GROUPS}')
    for (i, group) in enumerate(value):
        _choice(group, _join(path, i), PCBR_PARAM_GROUPS)
    # canonical order is the optimizer's group order
    return [group for group in PCBR_PARAM_GROUPS if group in value]


def _fill_freeze_schedule(value, path, num_epochs):
    if value is None:
        value = [{'start': 0, 'end': num_epochs, 'groups': list(PCBR_PARAM_GROUPS)}] if num_epochs > 0 else []
    if not isinstance(value, list):
        raise SchemaException(path, 'must be a list of {start, end, groups} entries')
    entries = []
    for (i, entry) in enumerate(value):
        entry_path = _join(path, i)
        entry = _mapping(entry, entry_path, ['start', 'end', 'groups'])
        for key in ['start', 'end', 'groups']:
            if key not in entry:
                raise SchemaException(_join(entry_path, key), 'is required')
        start = _int(entry['start'], _join(entry_path, 'start'), minimum=0)
        end = _int(entry['end'], _join(entry_path, 'end'), minimum=start + 1)
        entries.append({'start': start, 'end': end, 'groups': _fill_groups(entry['groups'], _join(entry_path, 'groups'))})
    # the ranges must tile [0, num_epochs) exactly
    order = sorted(range(len(entries)), key=lambda i: entries[i]['start'])
    covered = 0
    for i in order:
        if entries[i]['start'] != covered:
            problem = 'overlaps a previous range' if entries[i]['start'] < covered else f'leaves epochs {covered}..{entries[i]["start"] - 1} unscheduled'
            raise SchemaException(_join(_join(path, i), 'start'), problem)
        covered = entries[i]['end']
    if covered != num_epochs:
        raise SchemaException(path, f'covers epochs [0, {covered}) but num_epochs is {num_epochs}')
    return [entries[i] for i in order]


def fill_train_document(document):
    '''
    Validate and default-fill a training document.  See fill_model_document
    '''
    doc = _mapping(document, '', ['num_epochs', 'seed', 'optimizer', 'freeze_schedule', 'loss',
                                  'projection_epoch', 'pruning', 'checkpoint_every'])
    num_epochs = _int(doc.get('num_epochs', 20), 'num_epochs', minimum=0)

    optimizer = _mapping(doc.get('optimizer'), 'optimizer', ['kind', 'momentum', 'weight_decay', 'learning_rates'])
    rates = _mapping(optimizer.get('learning_rates'), 'optimizer.learning_rates', PCBR_PARAM_GROUPS)
    filled_optimizer = {
        'kind': _choice(optimizer.get('kind', 'adam'), 'optimizer.kind', ['sgd', 'adam']),
        'momentum': _float(optimizer.get('momentum', 0.9), 'optimizer.momentum', minimum=0.0, maximum=0.999),
        'weight_decay': _float(optimizer.get('weight_decay', 0.0), 'optimizer.weight_decay', minimum=0.0),
        'learning_rates': {group: _float(rates.get(group, PCBR_DEFAULT_LEARNING_RATES[group]), f'optimizer.learning_rates.{group}',
                                         minimum=0.0, strict_minimum=True)
                           for group in PCBR_PARAM_GROUPS}
    }

    loss = _mapping(doc.get('loss'), 'loss', ['cluster', 'separation', 'l1'])
    filled_loss = {
        'cluster': _float(loss.get('cluster', 0.8), 'loss.cluster', minimum=0.0),
        'separation': _float(loss.get('separation', 0.08), 'loss.separation', minimum=0.0),
        'l1': _float(loss.get('l1', 0.0), 'loss.l1', minimum=0.0)
    }

    default_projection = num_epochs // 2 if num_epochs > 0 else -1
    projection_epoch = _int(doc.get('projection_epoch', default_projection), 'projection_epoch', minimum=-1)
    if projection_epoch >= num_epochs and not (num_epochs == 0 and projection_epoch == -1):
        raise SchemaException('projection_epoch', f'must be < num_epochs ({num_epochs}), got {projection_epoch}')

    pruning = _mapping(doc.get('pruning'), 'pruning', ['enabled', 'weight_threshold', 'leaf_threshold'])
    filled_pruning = {
        'enabled': _bool(pruning.get('enabled', True), 'pruning.enabled'),
        'weight_threshold': _float(pruning.get('weight_threshold', 1e-3), 'pruning.weight_threshold', minimum=0.0),
        'leaf_threshold': _float(pruning.get('leaf_threshold', 0.01), 'pruning.leaf_threshold', minimum=0.0)
    }

    return {
        'num_epochs': num_epochs,
        'seed': _int(doc.get('seed', 0), 'seed', minimum=0),
        'optimizer': filled_optimizer,
        'freeze_schedule': _fill_freeze_schedule(doc.get('freeze_schedule'), 'freeze_schedule', num_epochs),
        'loss': filled_loss,
        'projection_epoch': projection_epoch,
        'pruning': filled_pruning,
        'checkpoint_every': _int(doc.get('checkpoint_every', 5), 'checkpoint_every', minimum=0)
    }


'''
Visualization documents
'''


def fill_viz_document(document):
    '''
    Validate and default-fill a visualization document.  See fill_model_document
    '''
    doc = _mapping(document, '', ['attribution', 'view', 'benchmark', 'explain'])

    attribution = _mapping(doc.get('attribution'), 'attribution', ['type', 'params'])
    attribution_type = _choice(attribution.get('type', 'upsampling'), 'attribution.type', PCBR_ATTRIBUTION_TYPES)
    attribution_params = _fill_params(attribution.get('params'), 'attribution.params',
                                      PCBR_ATTRIBUTION_PARAMS[attribution_type], {
                                          'num_samples': lambda v, p: _int(v, p, minimum=1),
                                          'noise_ratio': lambda v, p: _float(v, p, minimum=0.0),
                                          'seed': lambda v, p: _int(v, p, minimum=0),
                                          'stabilizer': lambda v, p: _float(v, p, minimum=0.0, strict_minimum=True)
                                      })

    view = _mapping(doc.get('view'), 'view', ['type', 'params'])
    view_params = _fill_params(view.get('params'), 'view.params',
                               {'percentile': 95.0, 'alpha': 0.5, 'colormap': 'jet'}, {
                                   'percentile': lambda v, p: _float(v, p, minimum=0.0, maximum=100.0),
                                   'alpha': lambda v, p: _float(v, p, minimum=0.0, maximum=1.0),
                                   'colormap': _identifier
                               })

    benchmark = _mapping(doc.get('benchmark'), 'benchmark', ['top_k', 'q', 'kinds', 'magnitudes'])
    kinds = benchmark.get('kinds', list(PCBR_PERTURBATION_KINDS))
    if not isinstance(kinds, list) or len(kinds) == 0:
        raise SchemaException('benchmark.kinds', f'must be a nonempty list from {PCBR_PERTURBATION_KINDS}')
    for (i, kind) in enumerate(kinds):
        _choice(kind, f'benchmark.kinds.{i}', PCBR_PERTURBATION_KINDS)
    magnitudes = _mapping(benchmark.get('magnitudes'), 'benchmark.magnitudes', PCBR_PERTURBATION_KINDS)
    q = _float(benchmark.get('q', 0.1), 'benchmark.q', minimum=0.0, maximum=1.0, strict_minimum=True)
    if q >= 1.0:
        raise SchemaException('benchmark.q', 'must be < 1')

    explain = _mapping(doc.get('explain'), 'explain', ['top_k'])

    return {
        'attribution': {'type': attribution_type, 'params': attribution_params},
        'view': {'type': _choice(view.get('type', 'heatmap'), 'view.type', PCBR_VIEW_TYPES), 'params': view_params},
        'benchmark': {
            'top_k': _int(benchmark.get('top_k', 1), 'benchmark.top_k', minimum=1),
            'q': q,
            'kinds': [kind for kind in PCBR_PERTURBATION_KINDS if kind in kinds],
            'magnitudes': {kind: _float(magnitudes.get(kind, PCBR_DEFAULT_MAGNITUDES[kind]),
                                        f'benchmark.magnitudes.{kind}', minimum=0.0)
                           for kind in PCBR_PERTURBATION_KINDS}
        },
        'explain': {'top_k': _int(explain.get('top_k', 3), 'explain.top_k', minimum=1)}
    }


class ConfigSpec:
    '''
    A validated, fully default-filled configuration document.  This is the
    abstract superclass of ModelSpec, DataSpec, TrainSpec and VizSpec; each
    concrete class supplies kind and a fill function, and adds accessors for
    the fields the rest of the framework reads.  Two specs are equal iff their
    filled documents are equal.
    Arguments:
        document: a parsed (not necessarily filled) document, or None
    Raises:
        SchemaException if the document violates the schema
    '''
    kind = None

    def __init__(self, document=None):
        self.document = self.fill(copy.deepcopy(document))

    @staticmethod
    def fill(document):
        raise NotImplementedError

    def to_document(self):
        '''
        Return a copy of the filled document, e.g. to edit and re-parse
        '''
        return copy.deepcopy(self.document)

    def replace(self, path, value):
        '''
        Return a new spec of the same kind with the entry at the dotted path set to value.
        The result is validated afresh.
        '''
        document = self.to_document()
        keys = path.split('.')
        target = document
        for key in keys[:-1]:
            target = target[key]
        target[keys[-1]] = value
        return type(self)(document)

    def __eq__(self, other):
        return isinstance(other, ConfigSpec) and self.kind == other.kind and self.document == other.document

    def __hash__(self):
        return hash(canonicalize(self)[1])

    def __repr__(self):
        return f'{type(self).__name__}({self.document!r})'


class ModelSpec(ConfigSpec):
    kind = 'model'
    fill = staticmethod(fill_model_document)

    @property
    def arch(self):
        return self.document['extractor']['backbone']['arch']

    @property
    def layer(self):
        return self.document['extractor']['backbone']['layer']

    @property
    def pretrained_weights(self):
        return self.document['extractor']['backbone']['pretrained_weights']

    @property
    def add_on(self):
        return self.document['extractor']['add_on']

    @property
    def classifier_kind(self):
        return self.document['classifier']['kind']

    @property
    def classifier_params(self):
        return self.document['classifier']['params']

    @property
    def similarity_kind(self):
        return self.document['similarity']['kind']

    @property
    def epsilon(self):
        return self.document['similarity']['epsilon']

    @property
    def compatibility_mode(self):
        return self.document['compatibility_mode']

    @property
    def prototype_dim(self):
        return self.document['prototype_dim']

    @property
    def num_classes(self):
        return self.document['num_classes']

    @property
    def num_prototypes(self):
        '''
        protopnet: one block of prototypes per class.  prototree: one prototype per internal node.
        '''
        if self.classifier_kind == PCBR_PROTOPNET:
            return self.num_classes * self.classifier_params['num_prototypes_per_class']
        return 2 ** self.classifier_params['depth'] - 1


class DataSpec(ConfigSpec):
    kind = 'data'
    fill = staticmethod(fill_data_document)

    @property
    def train_set(self):
        return self.document['train_set']

    @property
    def test_set(self):
        return self.document['test_set']

    @property
    def transform(self):
        return self.document['transform']

    @property
    def batch_size(self):
        return self.document['batch_size']

    @property
    def eval_batch_size(self):
        return self.document['eval_batch_size']

    @property
    def num_classes(self):
        return self.document['num_classes']

    @property
    def normalization(self):
        '''
        The (mean, std) of the final normalize op
        '''
        normalize = self.document['transform'][-1]
        return (normalize['mean'], normalize['std'])


class TrainSpec(ConfigSpec):
    kind = 'train'
    fill = staticmethod(fill_train_document)

    @property
    def num_epochs(self):
        return self.document['num_epochs']

    @property
    def seed(self):
        return self.document['seed']

    @property
    def optimizer(self):
        return self.document['optimizer']

    @property
    def freeze_schedule(self):
        return self.document['freeze_schedule']

    @property
    def loss(self):
        return self.document['loss']

    @property
    def projection_epoch(self):
        return self.document['projection_epoch']

    @property
    def pruning(self):
        return self.document['pruning']

    @property
    def checkpoint_every(self):
        return self.document['checkpoint_every']


class VizSpec(ConfigSpec):
    kind = 'viz'
    fill = staticmethod(fill_viz_document)

    @property
    def attribution_type(self):
        return self.document['attribution']['type']

    @property
    def attribution_params(self):
        return self.document['attribution']['params']

    @property
    def view_type(self):
        return self.document['view']['type']

    @property
    def view_params(self):
        return self.document['view']['params']

    @property
    def benchmark(self):
        return self.document['benchmark']

    @property
    def explain(self):
        return self.document['explain']


PCBR_SPEC_CLASSES = {
    'model': ModelSpec,
    'data': DataSpec,
    'train': TrainSpec,
    'viz': VizSpec
}


def parse_config(document, kind):
    '''
    Parse, validate and default-fill a configuration document.
    Arguments:
        document: YAML text (str or bytes).  An already-parsed dictionary is accepted as well.
        kind: one of 'model', 'data', 'train', 'viz'
    Returns:
        The corresponding ConfigSpec subclass instance, with every default explicit
    Raises:
        ConfigSyntaxException if the text is not valid YAML
        SchemaException if the document violates the schema, naming the offending path
    '''
    if kind not in PCBR_SPEC_CLASSES:
        raise SchemaException('<kind>', f'unknown configuration kind {kind!r}; expected one of {PCBR_CONFIG_KINDS}')
    if isinstance(document, bytes):
        document = document.decode('utf-8')
    if isinstance(document, str):
        try:
            document = yaml.safe_load(document)
        except yaml.YAMLError as error:
            raise ConfigSyntaxException(f'Malformed {kind} document: {error}')
    return PCBR_SPEC_CLASSES[kind](document)


def canonicalize(spec):
    '''
    The canonical text of a spec and its content hash.  The text is YAML with
    sorted keys, two-space indent and every default explicit; the hash is the
    hex SHA-256 of its UTF-8 bytes.
    Arguments:
        spec: a ConfigSpec
    Returns:
        (text, hash)
    '''
    text = yaml.safe_dump(spec.document, sort_keys=True, indent=2, default_flow_style=False,
                          allow_unicode=True)
    return (text, sha256_hex(text.encode('utf-8')))


def load_config(path, kind):
    '''
    Read and parse a configuration file.  Raises OSError if it can't be read.
    '''
    with open(path, 'r', encoding='utf-8') as file:
        return parse_config(file.read(), kind)


def _specs_by_kind(specs):
    if isinstance(specs, dict):
        return specs
    return {spec.kind: spec for spec in specs}


def snapshot_configs(specs, out_dir):
    '''
    Write the canonical copies of the four configuration documents into out_dir
    under their fixed file names (model.yml, data.yml, training.yml, visualization.yml).
    Rewriting identical specs leaves the bytes unchanged.
    Arguments:
        specs: a dictionary {kind: spec} or an iterable of the four specs
        out_dir: the directory to write to; created if missing
    Returns:
        a dictionary {kind: hash}
    Raises:
        OSError if out_dir is not writable
    '''
    by_kind = _specs_by_kind(specs)
    missing = [kind for kind in PCBR_CONFIG_KINDS if kind not in by_kind]
    if len(missing) > 0:
        raise SchemaException('<snapshot>', f'missing configuration documents {missing}')
    os.makedirs(out_dir, exist_ok=True)
    hashes = {}
    for kind in PCBR_CONFIG_KINDS:
        (text, digest) = canonicalize(by_kind[kind])
        with open(os.path.join(out_dir, PCBR_SNAPSHOT_FILES[kind]), 'wb') as file:
            file.write(text.encode('utf-8'))
        hashes[kind] = digest
    logging.info(f'Configuration snapshot written to {out_dir}')
    return hashes


def load_snapshot(directory):
    '''
    Read the four configuration snapshots of a training directory.
    Returns:
        a dictionary {kind: spec}
    '''
    return {kind: load_config(os.path.join(directory, PCBR_SNAPSHOT_FILES[kind]), kind)
            for kind in PCBR_CONFIG_KINDS}
