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
Tests for datasets, the synthetic shapes generator, transforms and batching
'''

import os

import numpy as np
import pytest
import torch
from PIL import Image

from pcbr import Dataset, DatasetItem, synth_shapes, image_folder, load_dataset, read_image
from pcbr import TransformPipeline, ImageBatch, to_batch, batches, ReproContext
from pcbr import PCBRException, ValueOutOfRangeException, ShapeMismatchException, DTYPE
from tiny_configs import make_specs


def test_synthetic_shapes():
    dataset = synth_shapes(20, 4, image_size=24, seed=3)
    assert len(dataset) == 20
    assert dataset.num_classes == 4
    assert dataset.class_names == ['circle', 'square', 'triangle', 'cross']
    assert dataset.has_masks()
    counts = np.bincount([item.label for item in dataset], minlength=4)
    assert counts.max() - counts.min() <= 1
    for item in dataset:
        assert item.image.shape == (3, 24, 24)
        assert item.image.min() >= 0 and item.image.max() <= 1
        assert 0.02 <= item.mask.mean() <= 0.4
        # the mask is exactly the region painted in the shape color
        painted = item.image[:, item.mask]
        assert np.allclose(painted, painted[:, :1])
    assert dataset.image_ids() == sorted(dataset.image_ids())


def test_synthetic_shapes_deterministic():
    first = synth_shapes(6, 3, image_size=16, seed=1)
    second = synth_shapes(6, 3, image_size=16, seed=1)
    other = synth_shapes(6, 3, image_size=16, seed=2)
    for (a, b) in zip(first, second):
        assert np.array_equal(a.image, b.image)
        assert np.array_equal(a.mask, b.mask)
    assert any(not np.array_equal(a.image, c.image) for (a, c) in zip(first, other))


def test_synthetic_shapes_limits():
    with pytest.raises(ValueOutOfRangeException):
        synth_shapes(10, 6)
    with pytest.raises(ValueOutOfRangeException):
        synth_shapes(10, 1)
    with pytest.raises(ValueOutOfRangeException):
        synth_shapes(2, 3)


def test_dataset_checks_items():
    good = DatasetItem(np.zeros((3, 8, 8)), 0, None, 'a')
    with pytest.raises(PCBRException):
        Dataset([good, DatasetItem(np.zeros((3, 8, 8)), 0, None, 'a')], ['x'])
    with pytest.raises(PCBRException):
        Dataset([DatasetItem(np.zeros((3, 8, 8)), 2, None, 'b')], ['x', 'y'])
    with pytest.raises(PCBRException):
        Dataset([DatasetItem(np.full((3, 8, 8), np.nan), 0, None, 'b')], ['x'])
    with pytest.raises(PCBRException):
        Dataset([DatasetItem(np.zeros((3, 8, 8)), 0, np.zeros((4, 4), dtype=bool), 'b')], ['x'])
    dataset = Dataset([DatasetItem(np.zeros((3, 8, 8)), 1, None, 'b'), good], ['x', 'y'])
    assert dataset.image_ids() == ['a', 'b']
    assert dataset.find('b').label == 1
    with pytest.raises(PCBRException):
        dataset.find('c')
    assert dataset.subset([1]).image_ids() == ['b']


def test_dataframe(tiny_dataset):
    frame = tiny_dataset.to_dataframe()
    assert list(frame.columns) == ['image_id', 'label', 'class_name', 'height', 'width', 'mask_fraction']
    assert len(frame) == 24
    assert frame.groupby('label').size().tolist() == [8, 8, 8]
    assert (frame['height'] == 16).all()


def _write_png(path, color, size=12):
    os.makedirs(os.path.dirname(path), exist_ok=True)
    Image.fromarray(np.full((size, size, 3), color, dtype=np.uint8)).save(path)


def test_image_folder(tmp_path):
    root = str(tmp_path)
    _write_png(os.path.join(root, 'train', 'cats', 'one.png'), 255)
    _write_png(os.path.join(root, 'train', 'cats', 'two.png'), 128)
    _write_png(os.path.join(root, 'train', 'dogs', 'three.png'), 0)
    with open(os.path.join(root, 'train', 'dogs', 'notes.txt'), 'w') as file:
        file.write('not an image')
    mask_path = os.path.join(root, 'masks', 'cats', 'one.png')
    os.makedirs(os.path.dirname(mask_path))
    mask = np.zeros((12, 12), dtype=np.uint8)
    mask[:6] = 255
    Image.fromarray(mask).save(mask_path)
    dataset = image_folder(root, 'train', image_size=12)
    assert dataset.class_names == ['cats', 'dogs']
    assert dataset.image_ids() == ['cats/one', 'cats/two', 'dogs/three']
    assert [item.label for item in dataset] == [0, 0, 1]
    assert np.allclose(dataset.find('cats/one').image, 1.0)
    assert dataset.find('cats/one').mask[:6].all() and not dataset.find('cats/one').mask[6:].any()
    assert dataset.find('cats/two').mask is None
    assert read_image(os.path.join(root, 'train', 'dogs', 'three.png'), 8).shape == (3, 8, 8)
    with pytest.raises(OSError):
        image_folder(os.path.join(root, 'missing'))
    specs = make_specs(data={'train_set': {'name': 'image_folder', 'params': {'root': root, 'split': 'train',
                                                                            'image_size': 12}}})
    with pytest.raises(ShapeMismatchException):
        load_dataset(specs['data'])


def test_load_dataset(tiny_specs):
    dataset = load_dataset(tiny_specs['data'])
    assert len(dataset) == 24
    assert load_dataset(tiny_specs['data'], 'test_set') is None


def test_transform_without_augmentation(tiny_specs, tiny_dataset):
    pipeline = TransformPipeline(tiny_specs['data'].transform)
    image = tiny_dataset[0].image
    normalized = pipeline(image)
    assert np.allclose(normalized, (image - 0.5) / 0.25)
    assert np.allclose(pipeline.denormalize(normalized), image)


def test_augmentation_draws_are_fixed():
    # a flip that happens and one that does not consume the same draws
    ops = [{'op': 'hflip', 'p': 1.0}, {'op': 'brightness_jitter', 'magnitude': 0.2},
           {'op': 'normalize', 'mean': [0.0, 0.0, 0.0], 'std': [1.0, 1.0, 1.0]}]
    never = [dict(ops[0], p=0.0)] + ops[1:]
    image = np.random.default_rng(0).random((3, 8, 8))
    flipping = TransformPipeline(ops, np.random.default_rng(4))
    still = TransformPipeline(never, np.random.default_rng(4))
    for _ in range(5):
        assert np.allclose(flipping(image, augment=True), still(image, augment=True)[:, :, ::-1])
    assert flipping.rng.random() == still.rng.random()
    assert np.allclose(flipping(image), image)


def test_resize_and_jitter():
    ops = [{'op': 'resize', 'size': 4}, {'op': 'brightness_jitter', 'magnitude': 0.5},
           {'op': 'normalize', 'mean': [0.0, 0.0, 0.0], 'std': [1.0, 1.0, 1.0]}]
    pipeline = TransformPipeline(ops, np.random.default_rng(0))
    image = np.full((3, 8, 8), 0.5)
    assert np.allclose(pipeline(image), 0.5)
    jittered = pipeline(image, augment=True)
    assert jittered.shape == (3, 4, 4)
    assert np.allclose(jittered, jittered[0, 0, 0])
    assert 0.25 <= jittered[0, 0, 0] <= 0.75


def test_batches(tiny_dataset, tiny_transform):
    all_batches = list(batches(tiny_dataset, 10, transform=tiny_transform))
    assert [len(batch) for batch in all_batches] == [10, 10, 4]
    assert all_batches[0].data.dtype == DTYPE
    assert all_batches[0].image_ids == tiny_dataset.image_ids()[:10]
    assert all_batches[2].labels.tolist() == [item.label for item in tiny_dataset[20:]]
    first = [batch.image_ids for batch in batches(tiny_dataset, 8, shuffle=True, rng=ReproContext(1).stream('shuffle'))]
    second = [batch.image_ids for batch in batches(tiny_dataset, 8, shuffle=True, rng=ReproContext(1).stream('shuffle'))]
    assert first == second
    assert sorted(sum(first, [])) == tiny_dataset.image_ids()
    with pytest.raises(ValueOutOfRangeException):
        batches(tiny_dataset, 0)
    with pytest.raises(ValueOutOfRangeException):
        batches(tiny_dataset, 4, shuffle=True)


def test_image_batch():
    batch = to_batch([np.zeros((3, 4, 4)), np.ones((3, 4, 4))], [0, 1], ['a', 'b'])
    assert batch.data.shape == (2, 3, 4, 4)
    assert batch.labels.dtype == torch.long
    with pytest.raises(ShapeMismatchException):
        ImageBatch(torch.zeros(3, 4, 4))
