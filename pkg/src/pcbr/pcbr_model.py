'''
The case-based reasoning pipeline: an extractor (backbone + add-on) producing a
latent map, a similarity layer comparing every latent vector to a bank of
prototypes, and a decision layer (linear or soft tree) mapping similarity
scores to class scores.

The built-in backbone, small_cnn, is four conv blocks on a 3-channel input:
    block1: conv3x3(3 -> 32, pad 1), relu, maxpool 2x2/2
    block2: conv3x3(32 -> 48, pad 1), relu, maxpool 2x2/2
    block3: conv3x3(48 -> 64, pad 1), relu, maxpool 2x2/2
    block4: conv3x3(64 -> 96, pad 1), relu
97,872 parameters.  On a 32x32 input the latent map after block1..block4 is
16x16, 8x8, 4x4 and 4x4; the minimum input is 8x8.
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

import logging
import math

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from pcbr.pcbr_utils import DTYPE, PCBR_PROTOPNET, PCBR_EXP_NEG_L2
from pcbr.pcbr_utils import UnknownBackboneException, ShapeMismatchException, ValueOutOfRangeException
from pcbr.pcbr_utils import InactivePrototypeException
from pcbr.pcbr_registry import Registry

_SMALL_CNN_CHANNELS = [3, 32, 48, 64, 96]
_SMALL_CNN_LAYERS = ['block1', 'block2', 'block3', 'block4']


def small_cnn(layer):
    '''
    Build the built-in backbone up to and including the named block.
    Arguments:
        layer: block1 .. block4
    Returns:
        (backbone, out_channels, min_input_size): a flat nn.Sequential of
        Conv2d/ReLU/MaxPool2d layers, its output channel count, and the smallest
        admissible input side
    '''
    if layer not in _SMALL_CNN_LAYERS:
        raise UnknownBackboneException(f'small_cnn has no layer {layer}; layers are {_SMALL_CNN_LAYERS}')
    depth = _SMALL_CNN_LAYERS.index(layer) + 1
    layers = []
    for block in range(depth):
        layers.append(nn.Conv2d(_SMALL_CNN_CHANNELS[block], _SMALL_CNN_CHANNELS[block + 1], kernel_size=3, padding=1))
        layers.append(nn.ReLU())
        if block < 3:
            layers.append(nn.MaxPool2d(kernel_size=2, stride=2))
    return (nn.Sequential(*layers), _SMALL_CNN_CHANNELS[depth], 2 ** min(depth, 3))


'''
Backbones: arch -> function(layer) -> (nn.Sequential, out_channels, min_input_size)
'''
BACKBONES = Registry('backbone', UnknownBackboneException)
BACKBONES.register('small_cnn', small_cnn)


class PrototypeRecord:
    '''
    Provenance of one prototype.  source_image_id, location and
    projection_distance are set by projection; class_assignment only for protopnet.
    '''

    def __init__(self, source_image_id=None, location=None, projection_distance=None, class_assignment=None,
                 active=True):
        self.source_image_id = source_image_id
        self.location = location
        self.projection_distance = projection_distance
        self.class_assignment = class_assignment
        self.active = active

    def to_dict(self):
        return {
            'source_image_id': self.source_image_id,
            'location': list(self.location) if self.location is not None else None,
            'projection_distance': self.projection_distance,
            'class_assignment': self.class_assignment,
            'active': self.active
        }

    @staticmethod
    def from_dict(record):
        location = record.get('location')
        return PrototypeRecord(record.get('source_image_id'), tuple(location) if location is not None else None,
                               record.get('projection_distance'), record.get('class_assignment'),
                               record.get('active', True))

    def __eq__(self, other):
        return isinstance(other, PrototypeRecord) and self.to_dict() == other.to_dict()


class PrototypeBank:
    '''
    The prototype vectors [P, D] and their records
    '''

    def __init__(self, vectors, records):
        if vectors.ndim != 2 or vectors.shape[0] != len(records) or len(records) == 0:
            raise ShapeMismatchException(f'A prototype bank needs P > 0 vectors [P, D] and P records')
        self.vectors = vectors
        self.records = records

    def __len__(self):
        return len(self.records)


class LatentMap:
    def __init__(self, data):
        self.data = data


class SimilarityMap:
    '''
    Similarity at every latent location.
    Arguments:
        data: [N, P, Hl, Wl] similarities
        distances: [N, P, Hl, Wl] squared L2 distances
    scores is the spatial max [N, P].
    '''

    def __init__(self, data, distances):
        self.data = data
        self.distances = distances
        self.scores = data.flatten(2).max(dim=2).values

    def locations(self):
        '''
        The (h, w) of each spatial max, [N, P, 2]; ties go to the lowest h, then w
        '''
        flat = self.data.detach().flatten(2).cpu().numpy()
        index = np.argmax(flat, axis=2)
        width = self.data.shape[3]
        return np.stack([index // width, index % width], axis=2)

    def min_distances(self):
        return self.distances.flatten(2).min(dim=2).values


class ClassScores:
    def __init__(self, data):
        self.data = data


class LinearHead(nn.Module):
    '''
    Class scores = scores . (weights * active)^T.  Initialized to +1 for a
    prototype's own class and -0.5 otherwise.
    Arguments:
        class_identity: [P, K] one-hot class assignment of each prototype
    '''

    def __init__(self, class_identity):
        super().__init__()
        self.register_buffer('class_identity', class_identity.to(DTYPE))
        self.weights = nn.Parameter(1.5 * class_identity.t().to(DTYPE) - 0.5)
        self.register_buffer('active', torch.ones(class_identity.shape[0], dtype=DTYPE))

    def effective_weights(self):
        return self.weights * self.active[None, :]


class TreeHead(nn.Module):
    '''
    A soft binary decision tree of the given depth.  Internal nodes are numbered
    in breadth-first order 0 .. 2^depth - 2; node j has left child 2j+1 and right
    child 2j+2.  Leaves are numbered left to right 0 .. 2^depth - 1.  At node j
    the probability of routing right is the similarity score of prototype
    node_to_prototype[j].  Leaf distributions are softmax(leaf_logits).
    routing_override forces a node left (0) or right (1); -1 means soft routing.
    '''

    def __init__(self, depth, num_classes):
        super().__init__()
        self.depth = depth
        internal = 2 ** depth - 1
        self.leaf_logits = nn.Parameter(torch.zeros(2 ** depth, num_classes, dtype=DTYPE))
        self.register_buffer('node_to_prototype', torch.arange(internal, dtype=torch.long))
        self.register_buffer('routing_override', torch.full((internal,), -1, dtype=torch.long))
        self.register_buffer('node_active', torch.ones(internal, dtype=torch.bool))

    @property
    def num_internal(self):
        return 2 ** self.depth - 1

    def leaf_distributions(self):
        return torch.softmax(self.leaf_logits, dim=1)

    def leaves_under(self, node):
        '''
        The leaf indices of the subtree rooted at internal node (or, for node >= num_internal, that leaf)
        '''
        (first, last) = (node, node)
        while first < self.num_internal:
            (first, last) = (2 * first + 1, 2 * last + 2)
        return list(range(first - self.num_internal, last - self.num_internal + 1))

    def internal_under(self, node):
        '''
        The internal nodes of the subtree rooted at node, in breadth-first order
        '''
        result = []
        level = [node]
        while len(level) > 0 and level[0] < self.num_internal:
            result.extend(level)
            level = [child for j in level for child in (2 * j + 1, 2 * j + 2)]
        return result


def squared_distances(latent, prototypes, compatibility_mode=False):
    '''
    Squared L2 distances [N, P, H, W] between every latent vector of latent [N, D, H, W]
    and every prototype [P, D].  Compatibility mode keeps the legacy operation
    order relu(sum x^2 + (-2 x.p + sum p^2)); the default clamps the expanded form at 0.
    '''
    if compatibility_mode:
        kernel = prototypes[:, :, None, None]
        x2_patch_sum = F.conv2d(latent ** 2, torch.ones_like(kernel))
        xp = F.conv2d(latent, kernel)
        p2 = (prototypes ** 2).sum(dim=1).view(-1, 1, 1)
        return F.relu(x2_patch_sum + (-2 * xp + p2))
    x2 = (latent ** 2).sum(dim=1, keepdim=True)
    p2 = (prototypes ** 2).sum(dim=1)[None, :, None, None]
    xp = torch.einsum('ndhw,pd->nphw', latent, prototypes)
    return torch.clamp(x2 - 2 * xp + p2, min=0.0)


def similarity_from_distances(distances, kind, epsilon, compatibility_mode=False):
    '''
    protopnet_log: log((d2 + 1) / (d2 + epsilon)); exp_neg_l2: exp(-d2)
    '''
    if kind == PCBR_EXP_NEG_L2:
        return torch.exp(-distances)
    if compatibility_mode:
        return torch.log((distances + 1) / (distances + epsilon))
    return torch.log1p(distances) - torch.log(distances + epsilon)


def similarity(latent, bank, kind, epsilon, compatibility_mode=False):
    '''
    Compare every latent vector to every prototype.
    Arguments:
        latent: a LatentMap (or tensor [N, D, H, W])
        bank: a PrototypeBank (or tensor [P, D])
        kind: protopnet_log or exp_neg_l2
        epsilon: the protopnet_log stabilizer
        compatibility_mode: use the legacy operation order
    Returns:
        a SimilarityMap
    Raises:
        ShapeMismatchException if the latent and prototype dimensions differ
    '''
    data = latent.data if isinstance(latent, LatentMap) else latent
    vectors = bank.vectors if isinstance(bank, PrototypeBank) else bank
    if data.shape[1] != vectors.shape[1]:
        raise ShapeMismatchException(f'Latent dimension {data.shape[1]} != prototype dimension {vectors.shape[1]}')
    distances = squared_distances(data, vectors, compatibility_mode)
    return SimilarityMap(similarity_from_distances(distances, kind, epsilon, compatibility_mode), distances)


def decide_linear(scores, head):
    '''
    ClassScores = scores . weights^T, with inactive prototypes contributing nothing
    '''
    weights = head.effective_weights() if isinstance(head, LinearHead) else head
    if scores.shape[1] != weights.shape[1]:
        raise ShapeMismatchException(f'{scores.shape[1]} scores for a head over {weights.shape[1]} prototypes')
    return ClassScores(scores @ weights.t())


def path_probabilities(scores, head):
    '''
    Probability [N, 2^depth] of reaching each leaf, left to right
    '''
    right = scores[:, head.node_to_prototype]
    override = head.routing_override[None, :]
    right = torch.where(override == 1, torch.ones_like(right), torch.where(override == 0, torch.zeros_like(right), right))
    n = scores.shape[0]
    paths = torch.ones(n, 1, dtype=scores.dtype, device=scores.device)
    for level in range(head.depth):
        start = 2 ** level - 1
        level_right = right[:, start:start + 2 ** level]
        paths = torch.stack([paths * (1 - level_right), paths * level_right], dim=2).reshape(n, 2 ** (level + 1))
    return paths


def decide_tree(scores, head):
    '''
    Soft routing through the tree: output[n] = sum over leaves of path probability x leaf distribution.
    Raises:
        ValueOutOfRangeException if a score is outside [0, 1]
    '''
    if scores.shape[1] != head.num_internal:
        raise ShapeMismatchException(f'{scores.shape[1]} scores for a tree with {head.num_internal} internal nodes')
    if bool(((scores < 0) | (scores > 1)).any()) or not bool(torch.isfinite(scores).all()):
        raise ValueOutOfRangeException('Tree routing scores must lie in [0, 1]')
    return ClassScores(path_probabilities(scores, head) @ head.leaf_distributions())


def greedy_path(scores, head):
    '''
    The internal nodes a single image visits when every soft decision is
    rounded (right iff its routing probability > 0.5).  Nodes with a routing
    override are followed but not reported.
    Arguments:
        scores: [P] similarity scores of one image
        head: the TreeHead
    Returns:
        list of (node, prototype index, went_right)
    '''
    path = []
    node = 0
    while node < head.num_internal:
        override = int(head.routing_override[node])
        if override != -1:
            node = 2 * node + 1 + override
            continue
        prototype = int(head.node_to_prototype[node])
        right = float(scores[prototype]) > 0.5
        path.append((node, prototype, right))
        node = 2 * node + 2 if right else 2 * node + 1
    return path


class CbrModel(nn.Module):
    '''
    A case-based reasoning classifier built from a ModelSpec.  Not built
    directly; use build_model.
    '''

    def __init__(self, spec, backbone, add_on, min_input_size):
        super().__init__()
        self.spec = spec
        self.backbone = backbone
        self.add_on = add_on
        self.min_input_size = min_input_size
        self.compatibility_mode = spec.compatibility_mode
        num_prototypes = spec.num_prototypes
        self.prototypes = nn.Parameter(torch.zeros(num_prototypes, spec.prototype_dim, dtype=DTYPE))
        if spec.classifier_kind == PCBR_PROTOPNET:
            per_class = spec.classifier_params['num_prototypes_per_class']
            assignment = torch.arange(num_prototypes) // per_class
            self.head = LinearHead(F.one_hot(assignment, spec.num_classes))
            self.records = [PrototypeRecord(class_assignment=int(k)) for k in assignment]
        else:
            self.head = TreeHead(spec.classifier_params['depth'], spec.num_classes)
            self.records = [PrototypeRecord() for _ in range(num_prototypes)]

    @property
    def kind(self):
        return self.spec.classifier_kind

    @property
    def bank(self):
        return PrototypeBank(self.prototypes, self.records)

    def active_prototypes(self):
        return [p for (p, record) in enumerate(self.records) if record.active]

    def check_active(self, p):
        if not 0 <= p < len(self.records):
            raise InactivePrototypeException(f'No prototype {p}; the model has {len(self.records)}')
        if not self.records[p].active:
            raise InactivePrototypeException(f'Prototype {p} has been pruned')

    def param_groups(self):
        '''
        Trainable parameters by group: backbone, add_on, prototypes, decision
        '''
        return {
            'backbone': list(self.backbone.parameters()),
            'add_on': list(self.add_on.parameters()),
            'prototypes': [self.prototypes],
            'decision': list(self.head.parameters())
        }

    def extract(self, x):
        if x.ndim != 4 or x.shape[1] != 3:
            raise ShapeMismatchException(f'Input must be [N, 3, H, W], not {list(x.shape)}')
        if min(x.shape[2], x.shape[3]) < self.min_input_size:
            raise ShapeMismatchException(f'Input {x.shape[2]}x{x.shape[3]} is smaller than the minimum {self.min_input_size}')
        return self.add_on(self.backbone(x))

    def similarity(self, latent):
        return similarity(latent, self.prototypes, self.spec.similarity_kind, self.spec.epsilon, self.compatibility_mode)

    def decide(self, scores):
        if self.kind == PCBR_PROTOPNET:
            return decide_linear(scores, self.head)
        return decide_tree(scores, self.head)

    def forward(self, x):
        '''
        The full pipeline on a tensor x [N, 3, H, W].
        Returns:
            (LatentMap, SimilarityMap, ClassScores)
        '''
        latent = self.extract(x)
        similarity_map = self.similarity(latent)
        return (LatentMap(latent), similarity_map, self.decide(similarity_map.scores))


def _build_add_on(descriptors, in_channels):
    layers = []
    channels = in_channels
    for descriptor in descriptors:
        if descriptor['kind'] == 'conv1x1':
            layers.append(nn.Conv2d(channels, descriptor['out_channels'], kernel_size=1))
            channels = descriptor['out_channels']
        elif descriptor['kind'] == 'sigmoid':
            layers.append(nn.Sigmoid())
        else:
            layers.append(nn.ReLU())
    return (nn.Sequential(*layers), channels)


def initialize_parameters(model, rng):
    '''
    Draw every parameter of a freshly built model from rng, in a fixed order: the
    conv layers of backbone and add-on (He-uniform weights, uniform biases in
    +-1/sqrt(fan_in)), then the prototypes (uniform in [0, 1]).  Heads get their
    fixed initial values (linear: +1 / -0.5; tree: uniform leaves).
    '''
    with torch.no_grad():
        for module in list(model.backbone) + list(model.add_on):
            if isinstance(module, nn.Conv2d):
                fan_in = module.in_channels * module.kernel_size[0] * module.kernel_size[1]
                bound = math.sqrt(6.0 / fan_in)
                module.weight.copy_(torch.from_numpy(rng.uniform(-bound, bound, size=tuple(module.weight.shape))))
                bias_bound = 1.0 / math.sqrt(fan_in)
                module.bias.copy_(torch.from_numpy(rng.uniform(-bias_bound, bias_bound, size=tuple(module.bias.shape))))
        model.prototypes.copy_(torch.from_numpy(rng.uniform(0.0, 1.0, size=tuple(model.prototypes.shape))))


def build_model(spec, seed_stream, load_pretrained=True):
    '''
    Build and initialize a model.
    Arguments:
        spec: a ModelSpec
        seed_stream: a numpy Generator (normally the init substream)
    Returns:
        a CbrModel in float64, parameters drawn deterministically from seed_stream
    Raises:
        UnknownBackboneException if the arch (or layer) is not registered
        ShapeMismatchException if the extractor output channels differ from prototype_dim
    '''
    (backbone, channels, min_input_size) = BACKBONES.get(spec.arch)(spec.layer)
    (add_on, latent_channels) = _build_add_on(spec.add_on, channels)
    if latent_channels != spec.prototype_dim:
        raise ShapeMismatchException(f'Extractor output has {latent_channels} channels, prototype_dim is {spec.prototype_dim}')
    model = CbrModel(spec, backbone, add_on, min_input_size).to(DTYPE)
    initialize_parameters(model, seed_stream)
    if load_pretrained and spec.pretrained_weights is not None:
        state = torch.load(spec.pretrained_weights, map_location='cpu', weights_only=True)
        model.backbone.load_state_dict({key: value.to(DTYPE) for (key, value) in state.items()})
        logging.info(f'Loaded backbone weights from {spec.pretrained_weights}')
    logging.info(f'Built {spec.classifier_kind} model with {len(model.records)} prototypes on {spec.arch}.{spec.layer}')
    return model


def extract(model, batch):
    '''
    The latent map of an ImageBatch
    '''
    return LatentMap(model.extract(batch.data))


def forward(model, batch):
    '''
    The full pipeline on an ImageBatch: (LatentMap, SimilarityMap, ClassScores)
    '''
    return model(batch.data)
