'''
Attribution: where in an image does a prototype match?  Five methods produce
a per-pixel relevance map (nonnegative, max-normalized to 1 unless all zero)
and render_view turns a map into a bounding box, a crop or a heatmap overlay.

Images passed to the methods are normalized model inputs [3, H, W]; images
passed to render_view are raw RGB in [0, 1].

Bicubic upsampling uses the Catmull-Rom kernel (a = -0.5) as separable weight
matrices with half-pixel centers: output pixel i samples source coordinate
(i + 0.5) * in / out - 0.5 from the four taps around it, indices clamped to
the edge.  Equal input and output sizes give the identity.
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
import torch
import torch.nn.functional as F
from matplotlib import colormaps
from PIL import Image

from pcbr.pcbr_utils import DTYPE, UnsupportedLayerException, UnknownKindException, jsonifiable_value
from pcbr.pcbr_registry import Registry

CATMULL_ROM_A = -0.5


class AttributionMap:
    '''
    Per-pixel relevance of one prototype in one image.
    Arguments:
        data: float64 array [H, W], values in [0, 1]
        method: the attribution type that produced it
        prototype_index: the prototype
        image_id: the image, if known
        normalization_max: the maximum the raw map was divided by (0 for an all-zero map)
    '''

    def __init__(self, data, method, prototype_index, image_id=None, normalization_max=1.0):
        self.data = data
        self.method = method
        self.prototype_index = prototype_index
        self.image_id = image_id
        self.normalization_max = normalization_max


class PatchView:
    '''
    A rendered view of an attribution map.  bbox is (h0, w0, h1, w1) with
    exclusive ends; rendered is a uint8 array [h, w, 3].  degenerate marks a
    view made from an all-zero map (its bbox is the whole image).
    '''

    def __init__(self, kind, bbox, rendered, degenerate=False):
        self.kind = kind
        self.bbox = bbox
        self.rendered = rendered
        self.degenerate = degenerate


def normalize_map(raw, method, prototype_index, image_id=None):
    '''
    Clamp a raw map below at 0 and divide by its maximum.  An all-zero map stays zero.
    '''
    clamped = np.clip(np.asarray(raw, dtype=np.float64), 0.0, None)
    maximum = float(clamped.max()) if clamped.size > 0 else 0.0
    data = clamped / maximum if maximum > 0 else np.zeros_like(clamped)
    return AttributionMap(data, method, prototype_index, image_id, maximum)


def _as_input(image):
    tensor = torch.as_tensor(np.asarray(image) if not isinstance(image, torch.Tensor) else image).to(DTYPE)
    return tensor[None] if tensor.ndim == 3 else tensor


def cubic_kernel(x, a=CATMULL_ROM_A):
    x = abs(x)
    if x <= 1:
        return (a + 2) * x ** 3 - (a + 3) * x ** 2 + 1
    if x < 2:
        return a * x ** 3 - 5 * a * x ** 2 + 8 * a * x - 4 * a
    return 0.0


def cubic_weights(in_size, out_size):
    '''
    The [out_size, in_size] matrix of one-dimensional Catmull-Rom resampling
    '''
    weights = np.zeros((out_size, in_size))
    scale = in_size / out_size
    for i in range(out_size):
        source = (i + 0.5) * scale - 0.5
        base = math.floor(source)
        for j in range(base - 1, base + 3):
            weights[i, min(max(j, 0), in_size - 1)] += cubic_kernel(source - j)
    return weights


def upsample_bicubic(values, height, width):
    (in_h, in_w) = values.shape
    return cubic_weights(in_h, height) @ values @ cubic_weights(in_w, width).T


def attr_upsampling(model, image, p, image_id=None):
    '''
    The similarity map of prototype p, bicubically upsampled to the image size,
    clamped at 0 and max-normalized.
    Raises:
        InactivePrototypeException
    '''
    model.check_active(p)
    x = _as_input(image)
    with torch.no_grad():
        channel = model(x)[1].data[0, p].cpu().numpy()
    upsampled = upsample_bicubic(channel, x.shape[2], x.shape[3])
    return normalize_map(upsampled, 'upsampling', p, image_id)


def prototype_gradient(model, x, p):
    '''
    Gradient of the spatial-max similarity score of prototype p w.r.t. the input x [N, 3, H, W]
    (one gradient per image, since images don't interact)
    '''
    x = x.detach().clone().requires_grad_(True)
    scores = model(x)[1].scores[:, p]
    (gradient,) = torch.autograd.grad(scores.sum(), x)
    return gradient


def _gradient_map(gradient):
    return gradient.abs().sum(dim=0).cpu().numpy()


def attr_backprop(model, image, p, image_id=None):
    '''
    |d score_p / d pixel|, summed over color channels, max-normalized
    '''
    model.check_active(p)
    gradient = prototype_gradient(model, _as_input(image), p)[0]
    return normalize_map(_gradient_map(gradient), 'backprop', p, image_id)


def attr_smoothgrad(model, image, p, num_samples=10, noise_ratio=0.2, rng=None, image_id=None):
    '''
    The mean of the raw (signed) gradients over num_samples copies of the image
    with Gaussian noise of sigma = noise_ratio x (max - min pixel value), then
    absolute value, channel sum and normalization.  noise_ratio 0 is exactly backprop.
    Arguments:
        rng: a numpy Generator (normally the smoothgrad substream)
    '''
    model.check_active(p)
    x = _as_input(image)
    sigma = noise_ratio * float(x.max() - x.min())
    if sigma == 0:
        result = attr_backprop(model, image, p, image_id)
        result.method = 'smoothgrad'
        return result
    noise = torch.from_numpy(rng.standard_normal((num_samples,) + tuple(x.shape[1:]))).to(DTYPE) * sigma
    gradient = prototype_gradient(model, x + noise, p).mean(dim=0)
    return normalize_map(_gradient_map(gradient), 'smoothgrad', p, image_id)


def attr_randgrads(image, rng, p=None, image_id=None):
    '''
    An i.i.d. uniform [0, 1) map of the image's size; no model involved
    '''
    shape = np.asarray(image).shape if not isinstance(image, torch.Tensor) else tuple(image.shape)
    return normalize_map(rng.random(shape[-2:]), 'randgrads', p, image_id)


'''
PRP propagation rules for the layers of the built-in backbone and the add-on.
A rule maps (relevance at the layer output, layer, layer input) to relevance
at the layer input.
'''


class PropagationRule:
    def propagate(self, relevance, layer, activations):
        raise NotImplementedError


class ZPlusRule(PropagationRule):
    '''
    z+: only positive weights, no bias, with a sign-aware stabilizer
    '''

    def __init__(self, stabilizer=1e-9):
        self.stabilizer = stabilizer

    def propagate(self, relevance, layer, activations):
        activations = activations.detach().clone().requires_grad_(True)
        weight = torch.clamp(layer.weight.detach(), min=0)
        z = F.conv2d(activations, weight, None, layer.stride, layer.padding, layer.dilation, layer.groups)
        sign = torch.where(z >= 0, torch.ones_like(z), -torch.ones_like(z))
        s = (relevance / (z + self.stabilizer * sign)).detach()
        (gradient,) = torch.autograd.grad((z * s).sum(), activations)
        return (activations * gradient).detach()


class PassRule(PropagationRule):
    def propagate(self, relevance, layer, activations):
        return relevance


class WinnerTakesAllRule(PropagationRule):
    '''
    Max pooling: each pooled cell's relevance goes to the input that won the max
    '''

    def propagate(self, relevance, layer, activations):
        activations = activations.detach().clone().requires_grad_(True)
        (gradient,) = torch.autograd.grad(layer(activations), activations, grad_outputs=relevance)
        return gradient.detach()


'''
Layer class name -> function(stabilizer) -> PropagationRule
'''
PRP_RULES = Registry('relevance rule', UnsupportedLayerException)
PRP_RULES.register('Conv2d', lambda stabilizer: ZPlusRule(stabilizer))
PRP_RULES.register('ReLU', lambda stabilizer: PassRule())
PRP_RULES.register('Sigmoid', lambda stabilizer: PassRule())
PRP_RULES.register('MaxPool2d', lambda stabilizer: WinnerTakesAllRule())


def _layers(model):
    return list(model.backbone) + list(model.add_on)


def _rules(model, stabilizer):
    rules = []
    for (index, layer) in enumerate(_layers(model)):
        name = type(layer).__name__
        if name not in PRP_RULES:
            raise UnsupportedLayerException(f'No relevance rule for layer {index} ({name})')
        rules.append(PRP_RULES.get(name)(stabilizer))
    return rules


def similarity_relevance(latent_vector, prototype, score, stabilizer=1e-9):
    '''
    Split the score over latent dimensions in proportion to each dimension's
    share of the squared distance: R_d = score x (z_d - p_d)^2 / (d^2 + stabilizer)
    '''
    contributions = (latent_vector - prototype) ** 2
    return score * contributions / (contributions.sum() + stabilizer)


def attr_prp(model, image, p, stabilizer=1e-9, image_id=None, trace=None):
    '''
    Prototype relevance propagation.  Relevance starts at the latent cell where
    prototype p matches best, is split over latent dimensions by
    similarity_relevance, and flows back through the add-on and backbone layer
    by layer (z+ for convolutions, pass-through for activations, winner-takes-all
    for max pooling).  The input relevance is summed over channels, clamped and normalized.
    Arguments:
        trace: optional list; receives (layer index, layer name, relevance in, relevance out) sums per layer
    Raises:
        UnsupportedLayerException naming a layer without a rule
    '''
    model.check_active(p)
    rules = _rules(model, stabilizer)
    layers = _layers(model)
    x = _as_input(image).detach()
    with torch.no_grad():
        activations = [x]
        for layer in layers:
            activations.append(layer(activations[-1]))
        similarity_map = model.similarity(activations[-1])
        (h, w) = similarity_map.locations()[0, p]
        score = similarity_map.scores[0, p]
        relevance = torch.zeros_like(activations[-1])
        relevance[0, :, h, w] = similarity_relevance(activations[-1][0, :, h, w], model.prototypes[p].detach(),
                                                     score, stabilizer)
    for index in reversed(range(len(layers))):
        incoming = rules[index].propagate(relevance, layers[index], activations[index])
        if trace is not None:
            trace.append((index, type(layers[index]).__name__, float(relevance.sum()), float(incoming.sum())))
        relevance = incoming
    return normalize_map(relevance[0].sum(dim=0).cpu().numpy(), 'prp', p, image_id)


def attribution_rng(ctx, viz, image_id, p):
    '''
    The child generator for one (image, prototype) attribution.  smoothgrad draws
    from the smoothgrad substream; randgrads from the randgrads substream keyed by
    the seed of the visualization document as well.
    '''
    if viz.attribution_type == 'randgrads':
        return ctx.spawn('randgrads', f"{viz.attribution_params['seed']}/{image_id}/{p}")
    return ctx.spawn('smoothgrad', f'{image_id}/{p}')


def compute_attribution(model, image, p, viz, rng=None, image_id=None):
    '''
    Run the attribution method a VizSpec selects.
    Arguments:
        rng: the numpy Generator for smoothgrad and randgrads
    '''
    params = viz.attribution_params
    kind = viz.attribution_type
    if kind == 'upsampling':
        return attr_upsampling(model, image, p, image_id)
    if kind == 'backprop':
        return attr_backprop(model, image, p, image_id)
    if kind == 'smoothgrad':
        return attr_smoothgrad(model, image, p, params['num_samples'], params['noise_ratio'], rng, image_id)
    if kind == 'prp':
        return attr_prp(model, image, p, params['stabilizer'], image_id)
    if kind == 'randgrads':
        model.check_active(p)
        rng = np.random.default_rng(params['seed']) if rng is None else rng
        return attr_randgrads(image, rng, p, image_id)
    raise UnknownKindException(f'Unknown attribution type {kind}')


def bounding_box(data, percentile):
    '''
    The tightest (h0, w0, h1, w1) box around the nonzero pixels at or above the
    percentile value, or None if the map is all zero
    '''
    if not np.any(data > 0):
        return None
    threshold = np.percentile(data, percentile)
    (rows, cols) = np.nonzero((data >= threshold) & (data > 0))
    return (int(rows.min()), int(cols.min()), int(rows.max()) + 1, int(cols.max()) + 1)


def _to_uint8(image):
    return np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)


def render_view(attribution, image, viz):
    '''
    Render a map over a raw RGB image [3, H, W] in [0, 1] as the VizSpec's view type:
    bbox draws the box outline, crop cuts the box out, heatmap overlays the
    colormapped map at the configured alpha.  An all-zero map gives a degenerate
    view whose box is the whole image.
    Returns:
        a PatchView
    '''
    params = viz.view_params
    data = attribution.data
    (height, width) = data.shape
    bbox = bounding_box(data, params['percentile'])
    degenerate = bbox is None
    if degenerate:
        logging.warning(f'All-zero attribution map for prototype {attribution.prototype_index} on {attribution.image_id}')
        bbox = (0, 0, height, width)
    picture = np.transpose(np.asarray(image, dtype=np.float64), (1, 2, 0))
    (h0, w0, h1, w1) = bbox
    if viz.view_type == 'crop':
        rendered = picture[h0:h1, w0:w1]
    elif viz.view_type == 'bbox':
        rendered = picture.copy()
        outline = np.array([1.0, 1.0, 0.0])
        rendered[h0, w0:w1] = outline
        rendered[h1 - 1, w0:w1] = outline
        rendered[h0:h1, w0] = outline
        rendered[h0:h1, w1 - 1] = outline
    else:
        heat = colormaps[params['colormap']](data)[..., :3]
        rendered = params['alpha'] * heat + (1 - params['alpha']) * picture
    return PatchView(viz.view_type, bbox, _to_uint8(rendered), degenerate)


def save_view(view, attribution, path):
    '''
    Write the rendered view as a PNG and its JSON sidecar (same path, .json)
    {method, prototype_index, image_id, view, bbox, normalization_max, degenerate}
    '''
    os.makedirs(os.path.dirname(path) or '.', exist_ok=True)
    Image.fromarray(view.rendered).save(path, format='PNG')
    sidecar = {
        'method': attribution.method,
        'prototype_index': attribution.prototype_index,
        'image_id': attribution.image_id,
        'view': view.kind,
        'bbox': list(view.bbox),
        'normalization_max': attribution.normalization_max,
        'degenerate': view.degenerate
    }
    with open(os.path.splitext(path)[0] + '.json', 'w') as file:
        json.dump(jsonifiable_value(sidecar), file, sort_keys=True, indent=2)
    return sidecar
