'''
Saving and restoring trained models.  A checkpoint is a directory holding:
    params.bin     every parameter and buffer of the model (tensor file format below)
    optimizer.bin  the tensor entries of the optimizer state
    rng.bin        the RngSnapshot of the run
    meta.json      epoch, history, prototype records, operation mode, the canonical
                   configuration documents and their hashes, the optimizer's plain
                   (non-tensor) state, and the format version
The tensor file format is little-endian:
    magic b'PCBRTEN1', u32 tensor count, then per tensor in sorted name order:
    u16 name length, name (utf-8), u8 dtype code, u8 ndim, u32 x ndim dims,
    u64 byte count, raw data.
Also here: import of models saved by the legacy ProtoPNet and ProtoTree code
bases, through the mapping tables in pcbr/legacy/, and the switch between the
default and compatibility operation modes.
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

import json
import logging
import math
import os
import struct

import numpy as np
import torch

from pcbr.pcbr_utils import DTYPE, PCBR_PROTOPNET, PCBR_PROTOTREE, PCBR_CONFIG_KINDS, PCBR_SNAPSHOT_FILES
from pcbr.pcbr_utils import PCBR_FORMAT_VERSION, jsonifiable_value, sha256_hex
from pcbr.pcbr_utils import VersionMismatchException, HashMismatchException, CorruptFileException
from pcbr.pcbr_utils import UnknownFormatException, MissingParameterException, UnmappedParameterException
from pcbr.pcbr_utils import ShapeMismatchException, UnknownKindException
from pcbr.pcbr_config import ModelSpec, parse_config, canonicalize
from pcbr.pcbr_model import PrototypeRecord, build_model
from pcbr.pcbr_repro import ReproContext, RngSnapshot, capture, restore
from pcbr.pcbr_train import TrainState, build_optimizer

_TENSOR_MAGIC = b'PCBRTEN1'

'''
dtype code -> (torch dtype, little-endian numpy dtype)
'''
PCBR_TENSOR_DTYPES = {
    0: (torch.float64, '<f8'),
    1: (torch.float32, '<f4'),
    2: (torch.int64, '<i8'),
    3: (torch.int32, '<i4'),
    4: (torch.bool, '|b1'),
    5: (torch.uint8, '|u1')
}
_DTYPE_CODES = {torch_dtype: code for (code, (torch_dtype, _)) in PCBR_TENSOR_DTYPES.items()}

PCBR_DEFAULT_MODE = 'default'
PCBR_COMPATIBILITY_MODE = 'compatibility'
PCBR_MODES = [PCBR_DEFAULT_MODE, PCBR_COMPATIBILITY_MODE]

PCBR_LEGACY_FORMATS = ['legacy_protopnet', 'legacy_prototree']
_LEGACY_DIRECTORY = os.path.join(os.path.dirname(os.path.abspath(__file__)), 'legacy')


def write_tensors(tensors):
    '''
    Serialize a dictionary name -> tensor in the tensor file format
    Arguments:
        tensors: dictionary of torch tensors
    Returns:
        bytes
    Raises:
        CorruptFileException if a tensor has a dtype the format does not carry
    '''
    parts = [_TENSOR_MAGIC, struct.pack('<I', len(tensors))]
    for name in sorted(tensors.keys()):
        tensor = tensors[name].detach().cpu().contiguous()
        if tensor.dtype not in _DTYPE_CODES:
            raise CorruptFileException(f'Tensor {name} has unsupported dtype {tensor.dtype}')
        code = _DTYPE_CODES[tensor.dtype]
        raw = tensor.numpy().astype(PCBR_TENSOR_DTYPES[code][1], copy=False).tobytes()
        encoded = name.encode('utf-8')
        parts.append(struct.pack('<H', len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack('<BB', code, tensor.ndim))
        parts.append(struct.pack(f'<{tensor.ndim}I', *tensor.shape))
        parts.append(struct.pack('<Q', len(raw)))
        parts.append(raw)
    return b''.join(parts)


def read_tensors(data):
    '''
    Parse the tensor file format.
    Returns:
        dictionary name -> tensor
    Raises:
        CorruptFileException on any malformation
    '''
    try:
        if data[:len(_TENSOR_MAGIC)] != _TENSOR_MAGIC:
            raise CorruptFileException('Tensor file has a bad magic number')
        offset = len(_TENSOR_MAGIC)
        (count,) = struct.unpack_from('<I', data, offset)
        offset += 4
        tensors = {}
        for _ in range(count):
            (length,) = struct.unpack_from('<H', data, offset)
            offset += 2
            name = data[offset:offset + length].decode('utf-8')
            offset += length
            (code, ndim) = struct.unpack_from('<BB', data, offset)
            offset += 2
            if code not in PCBR_TENSOR_DTYPES:
                raise CorruptFileException(f'Tensor {name} has unknown dtype code {code}')
            shape = struct.unpack_from(f'<{ndim}I', data, offset)
            offset += 4 * ndim
            (nbytes,) = struct.unpack_from('<Q', data, offset)
            offset += 8
            dtype = np.dtype(PCBR_TENSOR_DTYPES[code][1])
            if nbytes != math.prod(shape) * dtype.itemsize or offset + nbytes > len(data):
                raise CorruptFileException(f'Tensor {name} is truncated')
            values = np.frombuffer(data, dtype=dtype, count=math.prod(shape), offset=offset).reshape(shape)
            tensors[name] = torch.from_numpy(values.copy())
            offset += nbytes
        if offset != len(data):
            raise CorruptFileException('Tensor file has trailing bytes')
        return tensors
    except (struct.error, UnicodeDecodeError, ValueError) as error:
        raise CorruptFileException(f'Tensor file is malformed: {error}')


def _read_bytes(path):
    try:
        with open(path, 'rb') as file:
            return file.read()
    except FileNotFoundError:
        raise CorruptFileException(f'Checkpoint file {path} is missing')


def _write_bytes(path, data):
    with open(path, 'wb') as file:
        file.write(data)


def mode_of(model):
    return PCBR_COMPATIBILITY_MODE if model.compatibility_mode else PCBR_DEFAULT_MODE


def _split_optimizer_state(optimizer):
    # tensors go to optimizer.bin as '<param index>.<key>'; everything else to meta.json
    if optimizer is None:
        return ({}, {'param_groups': [], 'state': {}})
    state_dict = optimizer.state_dict()
    tensors = {}
    plain = {}
    for (index, entry) in state_dict['state'].items():
        for (key, value) in entry.items():
            if isinstance(value, torch.Tensor):
                tensors[f'{index}.{key}'] = value
            else:
                plain.setdefault(str(index), {})[key] = value
    return (tensors, {'param_groups': state_dict['param_groups'], 'state': plain})


def _join_optimizer_state(tensors, plain):
    state = {}
    for (name, tensor) in tensors.items():
        (index, key) = name.split('.', 1)
        state.setdefault(int(index), {})[key] = tensor
    for (index, entry) in plain['state'].items():
        state.setdefault(int(index), {}).update(entry)
    return {'state': state, 'param_groups': plain['param_groups']}


def save_checkpoint(state, directory):
    '''
    Write a TrainState as a checkpoint directory.  Saving the same state twice
    (or a state just loaded from a checkpoint) produces identical bytes.
    Arguments:
        state: the TrainState
        directory: the checkpoint directory; created if missing
    Raises:
        OSError if the directory is unwritable
    '''
    os.makedirs(directory, exist_ok=True)
    model = state.model
    specs = dict(state.specs, model=model.spec)
    canonical = {kind: canonicalize(specs[kind]) for kind in PCBR_CONFIG_KINDS if kind in specs}
    (optimizer_tensors, optimizer_plain) = _split_optimizer_state(state.optimizer)
    meta = {
        'format_version': PCBR_FORMAT_VERSION,
        'epoch': state.epoch,
        'mode': mode_of(model),
        'classifier_kind': model.kind,
        'master_seed': state.ctx.master_seed,
        'substreams': sorted(state.ctx.names),
        'config_hashes': {kind: digest for (kind, (_, digest)) in canonical.items()},
        'configs': {kind: text for (kind, (text, _)) in canonical.items()},
        'records': [record.to_dict() for record in model.records],
        'history': state.history,
        'optimizer': optimizer_plain
    }
    _write_bytes(os.path.join(directory, 'params.bin'), write_tensors(model.state_dict()))
    _write_bytes(os.path.join(directory, 'optimizer.bin'), write_tensors(optimizer_tensors))
    _write_bytes(os.path.join(directory, 'rng.bin'), capture(state.ctx).to_bytes())
    with open(os.path.join(directory, 'meta.json'), 'w', encoding='utf-8') as file:
        json.dump(jsonifiable_value(meta), file, indent=2, sort_keys=True)
        file.write('\n')
    logging.info(f'Checkpoint for epoch {state.epoch} written to {directory}')


def find_snapshot_directory(directory):
    '''
    The nearest directory at or above a checkpoint directory that holds a
    configuration snapshot (model.yml), or None
    '''
    current = os.path.abspath(directory)
    while True:
        if os.path.isfile(os.path.join(current, PCBR_SNAPSHOT_FILES['model'])):
            return current
        parent = os.path.dirname(current)
        if parent == current:
            return None
        current = parent


def verify_hashes(meta, directory, override_hash=False):
    '''
    Compare the configuration hashes recorded in a checkpoint with the snapshot
    files of its training directory.
    Arguments:
        meta: the checkpoint's meta.json contents
        directory: the checkpoint directory
        override_hash: log mismatches instead of refusing
    Returns:
        the list of kinds whose snapshot differs
    Raises:
        HashMismatchException if a snapshot was edited after training and override_hash is False
    '''
    snapshot_directory = find_snapshot_directory(directory)
    if snapshot_directory is None:
        logging.warning(f'No configuration snapshot above {directory}; hashes not verified')
        return []
    mismatched = []
    for (kind, recorded) in meta['config_hashes'].items():
        path = os.path.join(snapshot_directory, PCBR_SNAPSHOT_FILES[kind])
        if not os.path.isfile(path):
            continue
        with open(path, 'rb') as file:
            if sha256_hex(file.read()) != recorded:
                mismatched.append(kind)
    if len(mismatched) > 0:
        message = f'Configuration snapshots {mismatched} in {snapshot_directory} changed after the checkpoint was written'
        if not override_hash:
            raise HashMismatchException(message)
        logging.warning(f'{message}; continuing with the configurations recorded in the checkpoint')
    return mismatched


def _read_meta(directory):
    try:
        with open(os.path.join(directory, 'meta.json'), 'r', encoding='utf-8') as file:
            meta = json.load(file)
    except FileNotFoundError:
        raise CorruptFileException(f'{directory} has no meta.json')
    except json.JSONDecodeError as error:
        raise CorruptFileException(f'{directory}/meta.json is not valid JSON: {error}')
    if not isinstance(meta, dict) or 'format_version' not in meta:
        raise CorruptFileException(f'{directory}/meta.json has no format_version')
    if meta['format_version'] != PCBR_FORMAT_VERSION:
        raise VersionMismatchException(f'Checkpoint format version {meta["format_version"]} is not {PCBR_FORMAT_VERSION}')
    return meta


def load_checkpoint(directory, override_hash=False):
    '''
    Restore a TrainState from a checkpoint directory: model parameters and
    buffers, prototype records, operation mode, optimizer state, RNG state,
    epoch and history.  The model is rebuilt from the configurations recorded
    in the checkpoint.
    Arguments:
        directory: the checkpoint directory
        override_hash: accept configuration snapshots edited after training
    Returns:
        the TrainState
    Raises:
        VersionMismatchException if the format version differs
        HashMismatchException if a configuration snapshot was edited (unless override_hash)
        CorruptFileException if a file is missing or malformed
    '''
    meta = _read_meta(directory)
    verify_hashes(meta, directory, override_hash)
    try:
        specs = {kind: parse_config(text, kind) for (kind, text) in meta['configs'].items()}
        records = [PrototypeRecord.from_dict(record) for record in meta['records']]
    except (KeyError, TypeError, AttributeError) as error:
        raise CorruptFileException(f'{directory}/meta.json is incomplete: {error}')
    model = build_model(specs['model'], ReproContext(0).stream('init'), load_pretrained=False)
    params = read_tensors(_read_bytes(os.path.join(directory, 'params.bin')))
    try:
        model.load_state_dict(params, strict=True)
    except RuntimeError as error:
        raise CorruptFileException(f'{directory}/params.bin does not fit the recorded model: {error}')
    if len(records) != len(model.records):
        raise CorruptFileException(f'{directory}/meta.json has {len(records)} records for {len(model.records)} prototypes')
    model.records = records
    model.compatibility_mode = meta['mode'] == PCBR_COMPATIBILITY_MODE
    model.eval()

    ctx = ReproContext(meta['master_seed'], meta['substreams'])
    restore(ctx, RngSnapshot.from_bytes(_read_bytes(os.path.join(directory, 'rng.bin'))))
    optimizer = None
    if 'train' in specs and len(meta['optimizer']['param_groups']) > 0:
        optimizer = build_optimizer(model, specs['train'])
        tensors = read_tensors(_read_bytes(os.path.join(directory, 'optimizer.bin')))
        try:
            optimizer.load_state_dict(_join_optimizer_state(tensors, meta['optimizer']))
        except (ValueError, KeyError, RuntimeError) as error:
            raise CorruptFileException(f'{directory}/optimizer.bin does not fit the recorded optimizer: {error}')
    logging.info(f'Loaded {meta["mode"]}-mode checkpoint for epoch {meta["epoch"]} from {directory}')
    return TrainState(model, optimizer, ctx, specs, meta['epoch'], meta['history'])


def set_mode(model, mode):
    '''
    Switch a model between the default (numerically stabilized) operations and
    the compatibility (legacy operation order) ones.  The mode affects the
    similarity computation and, for trees, the leaf update rule.
    Arguments:
        model: the CbrModel (changed in place)
        mode: 'default' or 'compatibility'
    Returns:
        the model
    '''
    if mode not in PCBR_MODES:
        raise UnknownKindException(f'Unknown mode {mode}; modes are {PCBR_MODES}')
    flag = mode == PCBR_COMPATIBILITY_MODE
    model.compatibility_mode = flag
    model.spec = model.spec.replace('compatibility_mode', flag)
    logging.info(f'Model switched to {mode} mode')
    return model


'''
Legacy import
'''


def preorder_indices(depth):
    '''
    For a complete binary tree of the given depth, the pre-order (depth-first)
    index of every internal node, listed in breadth-first order
    '''
    internal = 2 ** depth - 1
    result = [0] * internal
    counter = 0
    stack = [0]
    while len(stack) > 0:
        node = stack.pop()
        if node >= internal:
            continue
        result[node] = counter
        counter += 1
        stack.append(2 * node + 2)
        stack.append(2 * node + 1)
    return result


def leaf_paths(depth):
    '''
    The left/right path to every leaf, left to right: 'll', 'lr', ... for depth 2
    '''
    return [format(leaf, f'0{depth}b').replace('0', 'l').replace('1', 'r') if depth > 0 else ''
            for leaf in range(2 ** depth)]


class LegacyMapping:
    '''
    How the parameters of one legacy format map onto a CbrModel.  Read from the
    JSON files in pcbr/legacy.
    Fields of the document:
        source_format: the format name
        classifier_kind, similarity_kind, epsilon, arch, layer: the model the format describes
        add_on: the add-on layer kinds, in order
        compatibility_mode: always true; legacy weights are only exact in compatibility mode
        parameters: {source_key: internal_key}
        prototypes: the source key of the prototype vectors
        classifier: (linear heads only) the source key the class count is read from, and its axis
        leaf_template: (trees only) source key of a leaf's parameters, with {path} the
            '.l'/'.r' path from the root
    '''

    def __init__(self, document):
        required = ['source_format', 'classifier_kind', 'similarity_kind', 'epsilon', 'arch', 'layer', 'add_on',
                    'compatibility_mode', 'parameters', 'prototypes']
        missing = [key for key in required if key not in document]
        if len(missing) > 0:
            raise UnknownFormatException(f'Legacy mapping is missing {missing}')
        self.document = document
        self.source_format = document['source_format']
        self.classifier_kind = document['classifier_kind']
        self.parameters = dict(document['parameters'])
        self.leaf_template = document.get('leaf_template')

    @staticmethod
    def load(source_format):
        '''
        The shipped mapping for a format name.  Raises UnknownFormatException for any other name
        '''
        if source_format not in PCBR_LEGACY_FORMATS:
            raise UnknownFormatException(f'Unknown legacy format {source_format}; formats are {PCBR_LEGACY_FORMATS}')
        with open(os.path.join(_LEGACY_DIRECTORY, f'{source_format}.json'), 'r', encoding='utf-8') as file:
            return LegacyMapping(json.load(file))

    def expand(self, depth=None):
        '''
        The full {source_key: internal_key} table; for trees the leaf entries of the given depth are added
        '''
        table = dict(self.parameters)
        if self.leaf_template is not None:
            for (leaf, path) in enumerate(leaf_paths(depth)):
                source = self.leaf_template.format(path=''.join(f'.{step}' for step in path))
                table[source] = f'head.leaf_logits[{leaf}]'
        return table


def _read_legacy_file(path):
    try:
        state = torch.load(path, map_location='cpu', weights_only=True)
    except FileNotFoundError:
        raise
    except Exception as error:
        raise CorruptFileException(f'{path} is not a readable legacy model: {error}')
    if hasattr(state, 'state_dict') and not isinstance(state, dict):
        state = state.state_dict()
    if not isinstance(state, dict) or not all(isinstance(value, torch.Tensor) for value in state.values()):
        raise CorruptFileException(f'{path} does not hold a dictionary of tensors')
    return state


def _require(state, key):
    if key not in state:
        raise MissingParameterException(f'Legacy parameter {key} is missing')
    return state[key]


def _legacy_model_document(mapping, state):
    # infer the sizes the legacy file was trained with
    prototypes = _require(state, mapping.document['prototypes'])
    (num_prototypes, prototype_dim) = (prototypes.shape[0], prototypes.shape[1])
    if mapping.classifier_kind == PCBR_PROTOPNET:
        classifier = mapping.document['classifier']
        num_classes = _require(state, classifier['key']).shape[classifier['axis']]
        if num_prototypes % num_classes != 0:
            raise ShapeMismatchException(f'{num_prototypes} prototypes do not divide among {num_classes} classes')
        params = {'num_prototypes_per_class': num_prototypes // num_classes}
    else:
        depth = int(round(math.log2(num_prototypes + 1)))
        if 2 ** depth - 1 != num_prototypes:
            raise ShapeMismatchException(f'{num_prototypes} prototypes is not the internal node count of a complete tree')
        first_leaf = next(iter(mapping.expand(depth).keys() - mapping.parameters.keys()))
        num_classes = _require(state, first_leaf).shape[-1]
        params = {'depth': depth}
    reverse = {internal: source for (source, internal) in mapping.parameters.items()}
    add_on = []
    for (i, kind) in enumerate(mapping.document['add_on']):
        if kind == 'conv1x1':
            weight = _require(state, reverse[f'add_on.{i}.weight'])
            add_on.append({'kind': kind, 'out_channels': int(weight.shape[0])})
        else:
            add_on.append({'kind': kind})
    return {
        'extractor': {'backbone': {'arch': mapping.document['arch'], 'layer': mapping.document['layer']},
                      'add_on': add_on},
        'classifier': {'kind': mapping.classifier_kind, 'params': params},
        'similarity': {'kind': mapping.document['similarity_kind'], 'epsilon': mapping.document['epsilon']},
        'compatibility_mode': True,
        'prototype_dim': int(prototype_dim),
        'num_classes': int(num_classes)
    }


def _squeezed(shape):
    return tuple(size for size in shape if size != 1)


def _target(model, internal_key):
    # 'head.leaf_logits[3]' addresses one row of a parameter
    if internal_key.endswith(']'):
        (name, row) = internal_key[:-1].split('[')
        return (model.get_parameter(name), int(row))
    return (model.get_parameter(internal_key), None)


def import_legacy(path, mapping):
    '''
    Build a CbrModel from a model file written by a legacy code base.  The
    model runs in compatibility mode, which reproduces the legacy operation
    order.
    Arguments:
        path: the legacy file (a torch-saved dictionary of tensors)
        mapping: a LegacyMapping, or the name of a shipped format
    Returns:
        the CbrModel
    Raises:
        UnknownFormatException for an unknown format name
        MissingParameterException naming a mapped parameter absent from the file
        UnmappedParameterException naming a file parameter the mapping does not cover
        ShapeMismatchException if a parameter does not have the expected shape
        CorruptFileException if the file can't be read
    '''
    if not isinstance(mapping, LegacyMapping):
        mapping = LegacyMapping.load(mapping)
    state = _read_legacy_file(path)
    spec = ModelSpec(_legacy_model_document(mapping, state))
    model = build_model(spec, ReproContext(0).stream('init'), load_pretrained=False)
    depth = spec.classifier_params.get('depth')
    table = mapping.expand(depth)
    for source in sorted(table.keys()):
        _require(state, source)
    unmapped = sorted(key for key in state.keys() if key not in table)
    if len(unmapped) > 0:
        raise UnmappedParameterException(f'Legacy parameters {unmapped} have no mapping in {mapping.source_format}')
    covered = {internal.split('[')[0] for internal in table.values()}
    uncovered = sorted(name for (name, _) in model.named_parameters() if name not in covered)
    if len(uncovered) > 0:
        raise MissingParameterException(f'Mapping {mapping.source_format} leaves {uncovered} unset')

    with torch.no_grad():
        for (source, internal) in table.items():
            value = state[source].to(DTYPE)
            (parameter, row) = _target(model, internal)
            target = parameter[row] if row is not None else parameter
            if value.numel() != target.numel() or _squeezed(value.shape) != _squeezed(target.shape):
                raise ShapeMismatchException(f'Legacy parameter {source} has shape {list(value.shape)}, '
                                             f'{internal} needs {list(target.shape)}')
            target.copy_(value.reshape(target.shape))
        if mapping.classifier_kind == PCBR_PROTOTREE:
            model.head.node_to_prototype.copy_(torch.tensor(preorder_indices(depth), dtype=torch.long))
    model.eval()
    logging.info(f'Imported {mapping.source_format} model from {path}: {spec.num_prototypes} prototypes, '
                 f'{spec.num_classes} classes')
    return model


def import_state(model, specs, master_seed=0):
    '''
    A fresh TrainState around an imported model, ready to be saved as a native checkpoint
    '''
    ctx = ReproContext(master_seed)
    specs = dict(specs, model=model.spec)
    optimizer = build_optimizer(model, specs['train']) if 'train' in specs else None
    return TrainState(model, optimizer, ctx, specs)
