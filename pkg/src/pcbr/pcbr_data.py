'''
Datasets, preprocessing and batching.  Images are held raw: float64 arrays
[3, H, W] with values in [0, 1].  Normalization (and any augmentation) is
applied by a TransformPipeline when batches are built, so the perturbation
benchmark can work on raw pixels and normalize afterwards.
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
import os

import numpy as np
import pandas as pd
import torch
import torch.nn.functional as F
from matplotlib.path import Path
from PIL import Image

from pcbr.pcbr_utils import DTYPE, PCBRException, UnknownDatasetException, ValueOutOfRangeException
from pcbr.pcbr_utils import ShapeMismatchException
from pcbr.pcbr_registry import Registry
from pcbr.pcbr_repro import ReproContext

PCBR_IMAGE_EXTENSIONS = ['.png', '.jpg', '.jpeg']

'''
Synthetic shapes: shape and base color per class, and the admissible mask fraction
'''
PCBR_SHAPES = ['circle', 'square', 'triangle', 'cross', 'star']
PCBR_SHAPE_COLORS = [
    (0.90, 0.15, 0.10),
    (0.10, 0.75, 0.20),
    (0.15, 0.25, 0.90),
    (0.95, 0.85, 0.10),
    (0.80, 0.20, 0.85)
]
PCBR_MASK_FRACTION_BOUNDS = (0.02, 0.4)


class DatasetItem:
    '''
    One image of a dataset.
    Arguments:
        image: float64 array [3, H, W], values in [0, 1]
        label: int class index
        mask: optional boolean array [H, W], the ground-truth object region
        image_id: stable, unique string identifier
    '''

    def __init__(self, image, label, mask, image_id):
        self.image = image
        self.label = label
        self.mask = mask
        self.image_id = image_id


def get_errors(item, num_classes):
    '''
    Return the list of problems with a dataset item (empty if it is well-formed)
    '''
    errors = []
    if not isinstance(item.image, np.ndarray) or item.image.ndim != 3 or item.image.shape[0] != 3:
        errors.append(f'{item.image_id}: image must be an array [3, H, W]')
    elif not np.all(np.isfinite(item.image)):
        errors.append(f'{item.image_id}: image has non-finite values')
    if not (0 <= item.label < num_classes):
        errors.append(f'{item.image_id}: label {item.label} outside [0, {num_classes})')
    if item.mask is not None and isinstance(item.image, np.ndarray) and item.mask.shape != item.image.shape[1:]:
        errors.append(f'{item.image_id}: mask shape {item.mask.shape} != image shape {item.image.shape[1:]}')
    return errors


class Dataset:
    '''
    An ordered, immutable collection of DatasetItems, sorted by image_id.
    Arguments:
        items: a list of DatasetItem
        class_names: list of class names; labels index into it
    Raises:
        PCBRException if any item is malformed or image ids repeat
    '''

    def __init__(self, items, class_names):
        self.class_names = list(class_names)
        errors = [error for item in items for error in get_errors(item, len(self.class_names))]
        if len(errors) > 0:
            raise PCBRException(f'Errors in dataset: {errors}')
        ids = [item.image_id for item in items]
        if len(set(ids)) != len(ids):
            raise PCBRException('Dataset image ids must be unique')
        self.items = sorted(items, key=lambda item: item.image_id)

    @property
    def num_classes(self):
        return len(self.class_names)

    def __len__(self):
        return len(self.items)

    def __getitem__(self, index):
        return self.items[index]

    def has_masks(self):
        return all(item.mask is not None for item in self.items)

    def image_ids(self):
        return [item.image_id for item in self.items]

    def find(self, image_id):
        '''
        The item with the given image id.  Raises PCBRException if there is none
        '''
        for item in self.items:
            if item.image_id == image_id:
                return item
        raise PCBRException(f'No image {image_id} in the dataset')

    def subset(self, indices):
        return Dataset([self.items[i] for i in indices], self.class_names)

    def to_dataframe(self):
        '''
        One row per item: image_id, label, class_name, height, width, mask_fraction
        '''
        return pd.DataFrame([{
            'image_id': item.image_id,
            'label': item.label,
            'class_name': self.class_names[item.label],
            'height': item.image.shape[1],
            'width': item.image.shape[2],
            'mask_fraction': float(item.mask.mean()) if item.mask is not None else None
        } for item in self.items])


def _polygon(shape, cy, cx, r):
    # Vertices (x, y) of the polygonal shapes, centered at (cx, cy) with radius r
    if shape == 'square':
        return [(cx - r, cy - r), (cx + r, cy - r), (cx + r, cy + r), (cx - r, cy + r)]
    if shape == 'triangle':
        return [(cx + r * math.cos(a), cy - r * math.sin(a))
                for a in [math.pi / 2, math.pi / 2 + 2 * math.pi / 3, math.pi / 2 + 4 * math.pi / 3]]
    if shape == 'cross':
        t = r / 3
        return [(cx - t, cy - r), (cx + t, cy - r), (cx + t, cy - t), (cx + r, cy - t), (cx + r, cy + t),
                (cx + t, cy + t), (cx + t, cy + r), (cx - t, cy + r), (cx - t, cy + t), (cx - r, cy + t),
                (cx - r, cy - t), (cx - t, cy - t)]
    # star: five points, inner radius 0.45 r
    return [(cx + (r if k % 2 == 0 else 0.45 * r) * math.cos(math.pi / 2 + k * math.pi / 5),
             cy - (r if k % 2 == 0 else 0.45 * r) * math.sin(math.pi / 2 + k * math.pi / 5))
            for k in range(10)]


def shape_mask(shape, cy, cx, r, image_size):
    '''
    The boolean support [image_size, image_size] of a shape, tested at pixel centers
    '''
    (ys, xs) = np.mgrid[0:image_size, 0:image_size]
    centers_y = ys + 0.5
    centers_x = xs + 0.5
    if shape == 'circle':
        return (centers_y - cy) ** 2 + (centers_x - cx) ** 2 <= r ** 2
    path = Path(_polygon(shape, cy, cx, r))
    points = np.stack([centers_x.ravel(), centers_y.ravel()], axis=1)
    return path.contains_points(points).reshape(image_size, image_size)


def _textured_background(rng, image_size):
    # a gray level with low-amplitude noise, slightly tinted per channel
    base = rng.uniform(0.3, 0.55)
    texture = 0.08 * rng.standard_normal((image_size, image_size))
    tint = rng.uniform(-0.03, 0.03, size=3)
    return np.clip(base + texture[None, :, :] + tint[:, None, None], 0.0, 1.0)


def synth_shapes(n, num_classes, image_size=32, seed=7, rng=None):
    '''
    Generate the synthetic shapes dataset.  Item i has label i mod num_classes, so
    class counts are balanced within 1.  Each image is one shape in the class's
    color (circle, square, triangle, cross, star for classes 0..4), jittered, at a
    random position and scale on a textured background.  The mask is exactly the
    set of pixels painted with the shape color; its fraction of the image is kept
    within PCBR_MASK_FRACTION_BOUNDS by resampling.
    Arguments:
        n: number of images, >= num_classes
        num_classes: 2..5
        image_size: side length in pixels
        seed: generation seed; the draws come from the synth_data substream of init_repro(seed)
        rng: a numpy Generator to use instead of the seeded substream
    Returns:
        a Dataset
    Raises:
        ValueOutOfRangeException if num_classes is not in 2..5 or n < num_classes
    '''
    if not 2 <= num_classes <= len(PCBR_SHAPES):
        raise ValueOutOfRangeException(f'synthetic_shapes supports 2..{len(PCBR_SHAPES)} classes, not {num_classes}')
    if n < num_classes:
        raise ValueOutOfRangeException(f'synthetic_shapes needs n >= num_classes, got n={n}, num_classes={num_classes}')
    if rng is None:
        rng = ReproContext(seed).stream('synth_data')
    (low, high) = PCBR_MASK_FRACTION_BOUNDS
    items = []
    for i in range(n):
        label = i % num_classes
        image = _textured_background(rng, image_size)
        for _ in range(1000):
            r = rng.uniform(0.15, 0.35) * image_size
            cy = rng.uniform(r * 0.6, image_size - r * 0.6)
            cx = rng.uniform(r * 0.6, image_size - r * 0.6)
            mask = shape_mask(PCBR_SHAPES[label], cy, cx, r, image_size)
            if low <= mask.mean() <= high:
                break
        else:
            raise ValueOutOfRangeException(f'Could not place a shape of admissible size in a {image_size}-pixel image')
        color = np.clip(np.array(PCBR_SHAPE_COLORS[label]) + rng.uniform(-0.05, 0.05, size=3), 0.0, 1.0)
        image[:, mask] = color[:, None]
        items.append(DatasetItem(image, label, mask, f'synth_{i:05d}'))
    return Dataset(items, PCBR_SHAPES[:num_classes])


def read_image(path, image_size):
    with Image.open(path) as raw:
        image = raw.convert('RGB').resize((image_size, image_size), Image.BILINEAR)
        return np.asarray(image, dtype=np.float64).transpose(2, 0, 1) / 255.0


def _read_mask(path, image_size):
    with Image.open(path) as raw:
        mask = raw.convert('L').resize((image_size, image_size), Image.NEAREST)
        return np.asarray(mask) > 127


def image_folder(root, split=None, image_size=32):
    '''
    Load images laid out as root[/split]/<class_name>/<image files>.  Labels follow the
    sorted class directory names; the image id is '<class_name>/<file stem>'.  A
    mask, when present, lives at root/masks/<image_id>.png (white = object).
    Raises:
        OSError if root is missing or unreadable
    '''
    base = root if split is None else os.path.join(root, split)
    if not os.path.isdir(base):
        raise FileNotFoundError(f'No image folder at {base}')
    class_names = sorted(entry for entry in os.listdir(base)
                         if os.path.isdir(os.path.join(base, entry)) and entry != 'masks')
    items = []
    for (label, class_name) in enumerate(class_names):
        class_dir = os.path.join(base, class_name)
        for file_name in sorted(os.listdir(class_dir)):
            (stem, extension) = os.path.splitext(file_name)
            if extension.lower() not in PCBR_IMAGE_EXTENSIONS:
                continue
            image_id = f'{class_name}/{stem}'
            mask_path = os.path.join(root, 'masks', class_name, f'{stem}.png')
            mask = _read_mask(mask_path, image_size) if os.path.exists(mask_path) else None
            items.append(DatasetItem(read_image(os.path.join(class_dir, file_name), image_size), label, mask, image_id))
    logging.info(f'Loaded {len(items)} images in {len(class_names)} classes from {base}')
    return Dataset(items, class_names)


'''
Registered datasets: name -> function(params, num_classes) -> Dataset
'''
DATASETS = Registry('dataset', UnknownDatasetException)
DATASETS.register('synthetic_shapes', lambda params, num_classes: synth_shapes(
    params['n'], num_classes, params['image_size'], params['seed']))
DATASETS.register('image_folder', lambda params, num_classes: image_folder(
    params['root'], params.get('split'), params['image_size']))


def load_dataset(spec, which='train_set'):
    '''
    Load the training (or test) set of a DataSpec.
    Arguments:
        spec: a DataSpec
        which: 'train_set' or 'test_set'
    Returns:
        the Dataset, items sorted by image_id, or None if which is test_set and none is configured
    Raises:
        UnknownDatasetException if the name is not registered
        OSError if the files can't be read
    '''
    entry = spec.document[which]
    if entry is None:
        return None
    factory = DATASETS.get(entry['name'])
    dataset = factory(entry['params'], spec.num_classes)
    if dataset.num_classes != spec.num_classes:
        raise ShapeMismatchException(f'{which} has {dataset.num_classes} classes, data document says {spec.num_classes}')
    return dataset


class TransformPipeline:
    '''
    The ordered preprocessing ops of a DataSpec.  The stochastic ops (hflip,
    random_shift, brightness_jitter) run only when augment is True and draw from
    rng, always the same number of draws per image whatever the outcome; resize
    and normalize always run.
    Arguments:
        ops: the transform list of a DataSpec
        rng: a numpy Generator (normally the augment substream)
    '''

    def __init__(self, ops, rng=None):
        self.ops = ops
        self.rng = rng
        normalize = ops[-1]
        self.mean = np.array(normalize['mean'], dtype=np.float64)
        self.std = np.array(normalize['std'], dtype=np.float64)

    def _resize(self, image, size):
        if image.shape[1] == size and image.shape[2] == size:
            return image
        tensor = torch.from_numpy(np.ascontiguousarray(image))[None]
        return F.interpolate(tensor, size=(size, size), mode='bilinear', align_corners=False)[0].numpy()

    def _shift(self, image, dy, dx):
        if dy == 0 and dx == 0:
            return image
        m = max(abs(dy), abs(dx))
        padded = np.pad(image, ((0, 0), (m, m), (m, m)), mode='edge')
        (h, w) = image.shape[1:]
        return padded[:, m - dy:m - dy + h, m - dx:m - dx + w]

    def __call__(self, image, augment=False):
        '''
        Apply the pipeline to a raw image [3, H, W]; returns the normalized image
        '''
        for op in self.ops:
            kind = op['op']
            if kind == 'resize':
                image = self._resize(image, op['size'])
            elif kind == 'normalize':
                image = self.normalize(image)
            elif augment:
                if kind == 'hflip':
                    if self.rng.random() < op['p']:
                        image = image[:, :, ::-1]
                elif kind == 'random_shift':
                    (dy, dx) = self.rng.integers(-op['max_shift'], op['max_shift'] + 1, size=2)
                    image = self._shift(image, int(dy), int(dx))
                elif kind == 'brightness_jitter':
                    factor = 1.0 + self.rng.uniform(-op['magnitude'], op['magnitude'])
                    image = np.clip(image * factor, 0.0, 1.0)
        return np.ascontiguousarray(image)

    def normalize(self, image):
        return (image - self.mean[:, None, None]) / self.std[:, None, None]

    def denormalize(self, image):
        return image * self.std[:, None, None] + self.mean[:, None, None]


class ImageBatch:
    '''
    A batch of normalized images.
    Arguments:
        data: float64 tensor [N, C, H, W]
        labels: optional long tensor [N]
        image_ids: optional list of N image ids
    '''

    def __init__(self, data, labels=None, image_ids=None):
        if data.ndim != 4:
            raise ShapeMismatchException(f'An image batch must be [N, C, H, W], not {list(data.shape)}')
        self.data = data
        self.labels = labels
        self.image_ids = image_ids

    def __len__(self):
        return self.data.shape[0]


def to_batch(images, labels=None, image_ids=None):
    '''
    Build an ImageBatch from a list of (already normalized) numpy images
    '''
    data = torch.from_numpy(np.stack(images).astype(np.float64)).to(DTYPE)
    label_tensor = torch.tensor(labels, dtype=torch.long) if labels is not None else None
    return ImageBatch(data, label_tensor, image_ids)


def batches(dataset, batch_size, shuffle=False, rng=None, transform=None, augment=False):
    '''
    Iterate over a dataset in batches.  The final partial batch is kept.
    Arguments:
        dataset: a Dataset
        batch_size: >= 1
        shuffle: if True the order is rng.permutation(len(dataset)), else dataset order
        rng: a numpy Generator (normally the shuffle substream); required if shuffle
        transform: a TransformPipeline; None passes the raw images through
        augment: passed to the transform
    Returns:
        a generator of ImageBatch
    '''
    if batch_size < 1:
        raise ValueOutOfRangeException(f'batch_size must be >= 1, not {batch_size}')
    if shuffle and rng is None:
        raise ValueOutOfRangeException('shuffled batches need a random generator')

    def generate():
        order = rng.permutation(len(dataset)) if shuffle else np.arange(len(dataset))
        for start in range(0, len(order), batch_size):
            chunk = [dataset[int(i)] for i in order[start:start + batch_size]]
            images = [transform(item.image, augment) if transform is not None else item.image for item in chunk]
            yield to_batch(images, [item.label for item in chunk], [item.image_id for item in chunk])

    return generate()
