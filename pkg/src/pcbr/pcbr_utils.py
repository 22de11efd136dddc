'''
Constants, exceptions and utilities for the prototype case-based reasoning framework
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

import hashlib
import json

import numpy as np
import torch

'''
Every tensor the framework creates is float64.  Mode agreement (1e-5) and the
finite-difference gradient checks are only meaningful at this precision.
'''
DTYPE = torch.float64

""" Classifier heads and similarity kinds """

PCBR_PROTOPNET = 'protopnet'
PCBR_PROTOTREE = 'prototree'
PCBR_CLASSIFIER_KINDS = [PCBR_PROTOPNET, PCBR_PROTOTREE]

PCBR_PROTOPNET_LOG = 'protopnet_log'
PCBR_EXP_NEG_L2 = 'exp_neg_l2'
PCBR_SIMILARITY_KINDS = [PCBR_PROTOPNET_LOG, PCBR_EXP_NEG_L2]

PCBR_ADD_ON_KINDS = ['conv1x1', 'sigmoid', 'relu']

""" Parameter groups, in the order the optimizer sees them """

PCBR_PARAM_GROUPS = ['backbone', 'add_on', 'prototypes', 'decision']

""" Attribution methods and views """

PCBR_ATTRIBUTION_TYPES = ['upsampling', 'smoothgrad', 'backprop', 'prp', 'randgrads']
PCBR_VIEW_TYPES = ['bbox', 'crop', 'heatmap']

""" Perturbation kinds for the faithfulness benchmark """

PCBR_PERTURBATION_KINDS = ['hue_shift', 'gaussian_blur', 'gaussian_noise', 'brightness']

'''
Named RNG substreams.  The names are fixed: checkpoints refuse snapshots
whose name set differs.
'''
PCBR_SUBSTREAMS = ['init', 'shuffle', 'augment', 'smoothgrad', 'randgrads', 'synth_data']

'''
Fixed file names inside a training directory
'''
PCBR_SNAPSHOT_FILES = {
    'model': 'model.yml',
    'data': 'data.yml',
    'train': 'training.yml',
    'viz': 'visualization.yml'
}
PCBR_CONFIG_KINDS = list(PCBR_SNAPSHOT_FILES.keys())

PCBR_FORMAT_VERSION = 1


'''
Exceptions for the framework.  Every error a user can provoke derives from
PCBRException, so the command line can tell user errors (exit 1) from
internal errors (exit 2).
'''


class PCBRException(Exception):
    '''
    The root of the framework's exceptions.  Carries a human-readable message.
    '''

    def __init__(self, message):
        super().__init__(message)
        self.message = message


class ConfigSyntaxException(PCBRException):
    '''
    A configuration document is not syntactically valid YAML
    '''


class SchemaException(PCBRException):
    '''
    A configuration document violates its schema.  path is the dotted path of the
    offending entry, e.g. classifier.params.depth
    '''

    def __init__(self, path, message):
        super().__init__(f'{path}: {message}')
        self.path = path


class UnknownBackboneException(PCBRException):
    pass


class ShapeMismatchException(PCBRException):
    pass


class ValueOutOfRangeException(PCBRException):
    pass


class NonFiniteLossException(PCBRException):
    pass


class EmptyProjectionSetException(PCBRException):
    pass


class AllPrunedException(PCBRException):
    pass


class UnknownDatasetException(PCBRException):
    pass


class InactivePrototypeException(PCBRException):
    pass


class UnsupportedLayerException(PCBRException):
    pass


class UnknownKindException(PCBRException):
    pass


class MissingMaskException(PCBRException):
    pass


class SchemaMismatchException(PCBRException):
    '''
    An RNG snapshot does not carry exactly the substreams of the context it is restored into
    '''


class VersionMismatchException(PCBRException):
    pass


class HashMismatchException(PCBRException):
    '''
    The configuration files of a training directory changed after the checkpoint was written
    '''


class CorruptFileException(PCBRException):
    pass


class UnknownFormatException(PCBRException):
    pass


class MissingParameterException(PCBRException):
    pass


class UnmappedParameterException(PCBRException):
    '''
    A legacy file holds a parameter the mapping does not know about.  Import refuses
    rather than silently dropping it.
    '''


def jsonifiable_value(value):
    '''
    numpy and torch scalars don't jsonify, so convert them (and containers of them)
    to plain Python values.  Everything else is returned as is.
    Arguments:
        value -- the value to be converted
    Returns
        A jsonifiable form of the value
    '''
    if isinstance(value, torch.Tensor):
        return jsonifiable_value(value.detach().cpu().numpy())
    if isinstance(value, np.ndarray):
        return [jsonifiable_value(v) for v in value.tolist()] if value.ndim > 0 else value.item()
    if isinstance(value, (np.bool_,)):
        return bool(value)
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    if isinstance(value, dict):
        return {str(key): jsonifiable_value(item) for (key, item) in value.items()}
    if isinstance(value, (list, tuple)):
        return [jsonifiable_value(item) for item in value]
    return value


def canonical_json(value):
    '''
    Serialize value as canonical JSON bytes: sorted keys, no whitespace, UTF-8.
    Two equal values always give identical bytes.
    '''
    return json.dumps(jsonifiable_value(value), sort_keys=True, separators=(',', ':')).encode('utf-8')


def json_line(value):
    '''
    The single-line JSON form used for command results on stdout
    '''
    return json.dumps(jsonifiable_value(value), sort_keys=True)


def sha256_hex(data):
    '''
    Hex SHA-256 of a bytes object
    '''
    return hashlib.sha256(data).hexdigest()


def hash64(*parts):
    '''
    A 64-bit integer derived from the SHA-256 of the parts, joined by ':'.
    Used to derive substream seeds: hash64(master_seed, name).
    '''
    text = ':'.join(str(part) for part in parts)
    digest = hashlib.sha256(text.encode('utf-8')).digest()
    return int.from_bytes(digest[:8], 'little')
