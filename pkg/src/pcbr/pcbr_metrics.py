'''
Explanation-quality benchmarks: local/dual perturbation faithfulness and the
pointing game (hit-based and energy-based).

Perturbations work on raw RGB images in [0, 1] and composite the perturbed
image under the mask with np.where, so perturbing a mask and then its
complement is the same as perturbing the whole image, bit for bit, for the
pixelwise kinds (hue_shift, gaussian_noise, brightness), provided the noise
field comes from identically seeded generators.
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

import numpy as np
import pandas as pd
import torch
from matplotlib.colors import rgb_to_hsv, hsv_to_rgb
from scipy.ndimage import gaussian_filter

from pcbr.pcbr_utils import DTYPE, PCBR_PERTURBATION_KINDS
from pcbr.pcbr_utils import UnknownKindException, MissingMaskException, ValueOutOfRangeException
from pcbr.pcbr_utils import ShapeMismatchException, jsonifiable_value
from pcbr.pcbr_attribution import compute_attribution, attribution_rng

PCBR_PERTURBATION_COLUMNS = ['image_id', 'prototype_index', 'method', 'perturbation_kind', 'magnitude',
                             'mask_fraction', 's_orig', 's_local', 's_dual', 's_global',
                             'drop_local', 'drop_dual', 'drop_global']
PCBR_POINTING_COLUMNS = ['image_id', 'prototype_index', 'method', 'hit', 'energy', 'mask_fraction']


def relevance_mask(attribution, q):
    '''
    The boolean mask of the max(1, ceil(q x H x W)) highest-valued pixels; ties
    go to the lowest (h, w).
    Arguments:
        attribution: an AttributionMap or an array [H, W]
        q: fraction in (0, 1)
    '''
    if not 0 < q < 1:
        raise ValueOutOfRangeException(f'Mask fraction must lie in (0, 1), not {q}')
    data = attribution.data if hasattr(attribution, 'method') else np.asarray(attribution)
    (height, width) = data.shape
    # round first so 0.07 x 100 counts 7 pixels, not 8
    count = max(1, math.ceil(round(q * height * width, 9)))
    order = np.argsort(-data.ravel(), kind='stable')
    mask = np.zeros(height * width, dtype=bool)
    mask[order[:count]] = True
    return mask.reshape(height, width)


def _perturbed_everywhere(image, kind, magnitude, rng):
    if kind == 'hue_shift':
        hsv = rgb_to_hsv(np.transpose(image, (1, 2, 0)))
        hsv[..., 0] = np.mod(hsv[..., 0] + magnitude / 360.0, 1.0)
        return np.transpose(hsv_to_rgb(hsv), (2, 0, 1))
    if kind == 'gaussian_blur':
        return gaussian_filter(image, sigma=(0, magnitude, magnitude), mode='reflect')
    if kind == 'gaussian_noise':
        return image + rng.standard_normal(image.shape) * magnitude
    if kind == 'brightness':
        return image * (1.0 + magnitude)
    raise UnknownKindException(f'Unknown perturbation {kind}; kinds are {PCBR_PERTURBATION_KINDS}')


def perturb(image, mask, kind, magnitude, rng=None):
    '''
    Perturb a raw image [3, H, W] only where mask is true.  hue_shift rotates the
    hue by magnitude degrees; gaussian_blur blurs with sigma = magnitude;
    gaussian_noise adds noise of sigma = magnitude drawn from rng over the whole
    image; brightness scales by 1 + magnitude.  Results are clamped to [0, 1].
    Raises:
        UnknownKindException
        ShapeMismatchException if the mask doesn't match the image
    '''
    image = np.asarray(image, dtype=np.float64)
    if mask.shape != image.shape[1:]:
        raise ShapeMismatchException(f'Mask {mask.shape} does not match image {image.shape[1:]}')
    perturbed = np.clip(_perturbed_everywhere(image, kind, magnitude, rng), 0.0, 1.0)
    return np.where(mask[None, :, :], perturbed, image)


class PerturbationResult:
    '''
    The scores of one prototype on one image before and after perturbing its
    relevance mask (local), everything else (dual), and the whole image (global)
    '''

    def __init__(self, image_id, prototype_index, method, kind, magnitude, mask_fraction, s_orig, s_local, s_dual,
                 s_global):
        self.image_id = image_id
        self.prototype_index = prototype_index
        self.method = method
        self.kind = kind
        self.magnitude = magnitude
        self.mask_fraction = mask_fraction
        self.s_orig = s_orig
        self.s_local = s_local
        self.s_dual = s_dual
        self.s_global = s_global

    @property
    def drop_local(self):
        return self.s_orig - self.s_local

    @property
    def drop_dual(self):
        return self.s_orig - self.s_dual

    @property
    def drop_global(self):
        return self.s_orig - self.s_global

    def to_dict(self):
        return dict(zip(PCBR_PERTURBATION_COLUMNS, [
            self.image_id, self.prototype_index, self.method, self.kind, self.magnitude, self.mask_fraction,
            self.s_orig, self.s_local, self.s_dual, self.s_global, self.drop_local, self.drop_dual, self.drop_global]))


def _scores(model, transform, images, p):
    data = torch.from_numpy(np.stack([transform(image) for image in images])).to(DTYPE)
    with torch.no_grad():
        return model(data)[1].scores[:, p].tolist()


def perturbation_scores(model, image, p, mask, kind, magnitude, transform, rng_factory):
    '''
    (s_orig, s_local, s_dual, s_global) of prototype p for a raw image and a mask.
    rng_factory() must return identically seeded generators on every call.
    '''
    everything = np.ones(mask.shape, dtype=bool)
    images = [image,
              perturb(image, mask, kind, magnitude, rng_factory()),
              perturb(image, ~mask, kind, magnitude, rng_factory()),
              perturb(image, everything, kind, magnitude, rng_factory())]
    return tuple(_scores(model, transform, images, p))


def top_prototypes(model, x, k):
    '''
    The k active prototypes with the highest similarity score on x [1, 3, H, W];
    ties go to the lower index
    '''
    with torch.no_grad():
        scores = model(x)[1].scores[0].cpu().numpy()
    active = model.active_prototypes()
    order = sorted(active, key=lambda p: (-scores[p], p))
    return order[:k]


def perturbation_benchmark(model, dataset, viz, transform, ctx, kinds=None, q=None, magnitudes=None):
    '''
    For every image and each of its top_k most similar active prototypes: compute
    the attribution map the VizSpec selects, take its relevance mask at fraction
    q, and score the prototype after local, dual and global perturbation of each kind.
    Arguments:
        model: a (projected) CbrModel
        dataset: the images to perturb
        viz: the VizSpec (attribution method; benchmark defaults)
        transform: the TransformPipeline normalizing raw images
        ctx: the ReproContext; each (image, prototype, kind) task draws from its own child substream
        kinds, q, magnitudes: override the VizSpec's benchmark block
    Returns:
        (results, summary): a DataFrame with one row per PerturbationResult and the summary dictionary
    '''
    settings = viz.benchmark
    kinds = settings['kinds'] if kinds is None else kinds
    q = settings['q'] if q is None else q
    magnitudes = settings['magnitudes'] if magnitudes is None else magnitudes
    results = []
    for item in dataset:
        x = torch.from_numpy(transform(item.image)[None]).to(DTYPE)
        for p in top_prototypes(model, x, settings['top_k']):
            attribution = compute_attribution(model, x[0], p, viz, attribution_rng(ctx, viz, item.image_id, p),
                                              item.image_id)
            mask = relevance_mask(attribution, q)
            for kind in kinds:
                task = f'perturbation/{item.image_id}/{p}/{kind}'
                scores = perturbation_scores(model, item.image, p, mask, kind, magnitudes[kind], transform,
                                             lambda: ctx.spawn('augment', task))
                results.append(PerturbationResult(item.image_id, p, attribution.method, kind, magnitudes[kind],
                                                  float(mask.mean()), *scores))
    frame = pd.DataFrame([result.to_dict() for result in results], columns=PCBR_PERTURBATION_COLUMNS)
    return (frame, summarize_perturbation(frame))


def summarize_perturbation(frame):
    '''
    Mean drops and mean relative drops (drop / s_orig) keyed by 'method/kind'
    '''
    summary = {}
    for ((method, kind), group) in frame.groupby(['method', 'perturbation_kind'], sort=True):
        safe = group[group['s_orig'] != 0]
        entry = {'count': int(len(group))}
        for name in ['local', 'dual', 'global']:
            entry[f'mean_drop_{name}'] = float(group[f'drop_{name}'].mean())
            entry[f'mean_relative_drop_{name}'] = float((safe[f'drop_{name}'] / safe['s_orig']).mean()) \
                if len(safe) > 0 else None
        summary[f'{method}/{kind}'] = entry
    return summary


def pointing_hit(data, mask):
    '''
    Does the first (lowest h, then w) argmax of the map lie in the mask?
    '''
    index = int(np.argmax(data))
    return bool(mask.ravel()[index])


def pointing_energy(data, mask):
    '''
    The share of the (nonnegative part of the) map's mass inside the mask; 0 for an all-zero map
    '''
    positive = np.clip(data, 0.0, None)
    total = positive.sum()
    return float(positive[mask].sum() / total) if total > 0 else 0.0


def pointing_game(model, dataset, viz, transform, ctx, top_k=None):
    '''
    The hit-based and energy-based pointing game over a dataset with masks,
    averaged over (image, prototype) pairs for the top_k most similar prototypes per image.
    Returns:
        (results, summary): a DataFrame with one row per pair and {method: {hit_rate, mean_energy, count,
        hit_rate_standard_error, mean_mask_fraction}}
    Raises:
        MissingMaskException if an item has no ground-truth mask
    '''
    top_k = viz.benchmark['top_k'] if top_k is None else top_k
    missing = [item.image_id for item in dataset if item.mask is None]
    if len(missing) > 0:
        raise MissingMaskException(f'Pointing game needs masks; missing for {missing[:5]}')
    rows = []
    for item in dataset:
        x = torch.from_numpy(transform(item.image)[None]).to(DTYPE)
        for p in top_prototypes(model, x, top_k):
            attribution = compute_attribution(model, x[0], p, viz, attribution_rng(ctx, viz, item.image_id, p),
                                              item.image_id)
            rows.append({
                'image_id': item.image_id,
                'prototype_index': p,
                'method': attribution.method,
                'hit': pointing_hit(attribution.data, item.mask),
                'energy': pointing_energy(attribution.data, item.mask),
                'mask_fraction': float(item.mask.mean())
            })
    frame = pd.DataFrame(rows, columns=PCBR_POINTING_COLUMNS)
    return (frame, summarize_pointing(frame))


def summarize_pointing(frame):
    summary = {}
    for (method, group) in frame.groupby('method', sort=True):
        hits = group['hit'].astype(float)
        summary[method] = {
            'count': int(len(group)),
            'hit_rate': float(hits.mean()),
            'hit_rate_standard_error': float(hits.std(ddof=1) / math.sqrt(len(group))) if len(group) > 1 else 0.0,
            'mean_energy': float(group['energy'].mean()),
            'mean_mask_fraction': float(group['mask_fraction'].mean())
        }
    return summary


def write_results(frame, summary, out_dir):
    '''
    Write results.csv and summary.json into out_dir
    '''
    os.makedirs(out_dir, exist_ok=True)
    frame.to_csv(os.path.join(out_dir, 'results.csv'), index=False)
    with open(os.path.join(out_dir, 'summary.json'), 'w') as file:
        json.dump(jsonifiable_value(summary), file, sort_keys=True, indent=2)
    logging.info(f'Wrote {len(frame)} results to {out_dir}')
