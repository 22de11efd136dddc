'''
This generates the legacy model fixtures the import tests run on.  A fixture is a
small random-weight model file in the key schema of a legacy code base, plus a
batch of inputs and the class scores a straightforward numpy implementation of
that code base's forward pass gives on them.  The numpy code below shares
nothing with the package: it computes distances by direct differences, walks
the tree recursively in pre-order, and does its own convolutions.
Run it as a script to write the fixtures into a directory:
    python tests/generate_legacy_fixtures.py <directory>
'''

import os
import sys

import numpy as np
import torch
from numpy.lib.stride_tricks import sliding_window_view

BACKBONE_CHANNELS = [3, 32, 48, 64, 96]
EPSILON = 1e-4
IMAGE_SIZE = 16


def conv2d(x, weight, bias, padding):
    # x [C, H, W], weight [O, C, k, k]
    k = weight.shape[2]
    padded = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
    windows = sliding_window_view(padded, (k, k), axis=(1, 2))
    return np.einsum('chwij,ocij->ohw', windows, weight) + bias[:, None, None]


def relu(x):
    return np.maximum(x, 0.0)


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def maxpool(x):
    (c, h, w) = x.shape
    return x[:, :h // 2 * 2, :w // 2 * 2].reshape(c, h // 2, 2, w // 2, 2).max(axis=(2, 4))


def backbone_forward(x, params, prefix):
    for block in range(4):
        index = 3 * block
        x = relu(conv2d(x, params[f'{prefix}.{index}.weight'], params[f'{prefix}.{index}.bias'], 1))
        if block < 3:
            x = maxpool(x)
    return x


def min_squared_distances(latent, prototypes):
    # latent [D, H, W], prototypes [P, D]; distance by direct differences
    vectors = latent.reshape(latent.shape[0], -1).T
    differences = vectors[None, :, :] - prototypes[:, None, :]
    return (differences ** 2).sum(axis=2).min(axis=1)


def softmax(x):
    e = np.exp(x - x.max())
    return e / e.sum()


def _random_backbone(rng, prefix):
    params = {}
    for block in range(4):
        (c_in, c_out) = (BACKBONE_CHANNELS[block], BACKBONE_CHANNELS[block + 1])
        bound = np.sqrt(6.0 / (c_in * 9))
        params[f'{prefix}.{3 * block}.weight'] = rng.uniform(-bound, bound, (c_out, c_in, 3, 3))
        params[f'{prefix}.{3 * block}.bias'] = rng.uniform(-0.05, 0.05, c_out)
    return params


def _as_float32(params):
    # legacy files are float32; the reference computes with the rounded values
    return {key: value.astype(np.float32) for (key, value) in params.items()}


def protopnet_reference(images, params):
    '''
    Class scores of the legacy linear head: log((d + 1) / (d + eps)) similarities
    of the nearest patch, times the last layer
    '''
    params = {key: value.astype(np.float64) for (key, value) in params.items()}
    prototypes = params['prototype_vectors'][:, :, 0, 0]
    result = []
    for image in images:
        z = backbone_forward(image, params, 'features')
        z = relu(conv2d(z, params['add_on_layers.0.weight'], params['add_on_layers.0.bias'], 0))
        z = sigmoid(conv2d(z, params['add_on_layers.2.weight'], params['add_on_layers.2.bias'], 0))
        distances = min_squared_distances(z, prototypes)
        similarities = np.log((distances + 1) / (distances + EPSILON))
        result.append(params['last_layer.weight'] @ similarities)
    return np.array(result)


def _tree_output(node_depth, depth, path, counter, similarities, params, probability):
    # pre-order walk: a node takes the next prototype index, then its left subtree, then its right
    if node_depth == depth:
        return probability * softmax(params['_root' + ''.join(f'.{step}' for step in path) + '._dist_params'])
    prototype = counter[0]
    counter[0] += 1
    right = similarities[prototype]
    left_result = _tree_output(node_depth + 1, depth, path + ['l'], counter, similarities, params,
                               probability * (1 - right))
    right_result = _tree_output(node_depth + 1, depth, path + ['r'], counter, similarities, params,
                                probability * right)
    return left_result + right_result


def prototree_reference(images, params, depth):
    '''
    Class distributions of the legacy soft tree: exp(-d) similarities route right
    '''
    params = {key: value.astype(np.float64) for (key, value) in params.items()}
    prototypes = params['prototype_layer.prototype_vectors'][:, :, 0, 0]
    result = []
    for image in images:
        z = backbone_forward(image, params, '_net')
        z = sigmoid(conv2d(z, params['_add_on.0.weight'], params['_add_on.0.bias'], 0))
        similarities = np.exp(-min_squared_distances(z, prototypes))
        result.append(_tree_output(0, depth, [], [0], similarities, params, 1.0))
    return np.array(result)


def leaf_keys(depth):
    keys = []
    for leaf in range(2 ** depth):
        path = format(leaf, f'0{depth}b').replace('0', 'l').replace('1', 'r')
        keys.append('_root' + ''.join(f'.{step}' for step in path) + '._dist_params')
    return keys


def make_protopnet_params(seed=0, num_classes=3, per_class=2, prototype_dim=8):
    rng = np.random.default_rng(seed)
    params = _random_backbone(rng, 'features')
    num_prototypes = num_classes * per_class
    params['add_on_layers.0.weight'] = rng.uniform(-0.2, 0.2, (prototype_dim, 96, 1, 1))
    params['add_on_layers.0.bias'] = rng.uniform(-0.05, 0.05, prototype_dim)
    params['add_on_layers.2.weight'] = rng.uniform(-0.5, 0.5, (prototype_dim, prototype_dim, 1, 1))
    params['add_on_layers.2.bias'] = rng.uniform(-0.05, 0.05, prototype_dim)
    params['prototype_vectors'] = rng.uniform(0.0, 1.0, (num_prototypes, prototype_dim, 1, 1))
    identity = np.eye(num_classes)[np.arange(num_prototypes) // per_class].T
    params['last_layer.weight'] = 1.5 * identity - 0.5 + rng.uniform(-0.1, 0.1, identity.shape)
    return _as_float32(params)


def make_prototree_params(seed=1, num_classes=3, depth=2, prototype_dim=8):
    rng = np.random.default_rng(seed)
    params = _random_backbone(rng, '_net')
    params['_add_on.0.weight'] = rng.uniform(-0.3, 0.3, (prototype_dim, 96, 1, 1))
    params['_add_on.0.bias'] = rng.uniform(-0.05, 0.05, prototype_dim)
    # prototypes near sigmoid outputs, so exp(-d) routing is not saturated at 0
    params['prototype_layer.prototype_vectors'] = rng.uniform(0.3, 0.7, (2 ** depth - 1, prototype_dim, 1, 1))
    for key in leaf_keys(depth):
        params[key] = rng.normal(0.0, 1.0, num_classes)
    return _as_float32(params)


def make_inputs(seed=2, count=4):
    return np.random.default_rng(seed).normal(0.0, 1.0, (count, 3, IMAGE_SIZE, IMAGE_SIZE))


def write_fixture(path, params):
    torch.save({key: torch.from_numpy(value) for (key, value) in params.items()}, path)


def write_fixtures(directory):
    '''
    Write both legacy fixtures into directory
    Returns:
        {format: {'path', 'params', 'inputs', 'expected'}}
    '''
    os.makedirs(directory, exist_ok=True)
    inputs = make_inputs()
    fixtures = {}
    protopnet = make_protopnet_params()
    path = os.path.join(directory, 'legacy_protopnet.pth')
    write_fixture(path, protopnet)
    fixtures['legacy_protopnet'] = {'path': path, 'params': protopnet, 'inputs': inputs,
                                    'expected': protopnet_reference(inputs, protopnet)}
    prototree = make_prototree_params()
    path = os.path.join(directory, 'legacy_prototree.pth')
    write_fixture(path, prototree)
    fixtures['legacy_prototree'] = {'path': path, 'params': prototree, 'inputs': inputs,
                                    'expected': prototree_reference(inputs, prototree, 2)}
    return fixtures


if __name__ == '__main__':
    target = sys.argv[1] if len(sys.argv) > 1 else 'legacy_fixtures'
    for (name, fixture) in write_fixtures(target).items():
        np.save(os.path.join(target, f'{name}_inputs.npy'), fixture['inputs'])
        np.save(os.path.join(target, f'{name}_expected.npy'), fixture['expected'])
