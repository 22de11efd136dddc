'''
Training: an epoch loop with a parameter-group freeze schedule, the head
losses, projection of prototypes onto training patches, and pruning.

A training directory looks like
    <out_dir>/model.yml, data.yml, training.yml, visualization.yml
    <out_dir>/seed.txt, env.json, history.csv
    <out_dir>/checkpoints/epoch_<n>/
    <out_dir>/final/
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

from pcbr.pcbr_utils import DTYPE, PCBR_PROTOPNET, PCBR_PARAM_GROUPS
from pcbr.pcbr_utils import NonFiniteLossException, EmptyProjectionSetException, AllPrunedException
from pcbr.pcbr_utils import ValueOutOfRangeException, ShapeMismatchException
from pcbr.pcbr_data import TransformPipeline, batches, load_dataset
from pcbr.pcbr_model import ClassScores, path_probabilities

PCBR_HISTORY_COLUMNS = ['epoch', 'loss', 'train_accuracy', 'eval_accuracy']


class TrainState:
    '''
    Everything needed to continue a run: the epoch reached, the model, the
    optimizer, the reproducibility context and the per-epoch history.
    Arguments:
        model: the CbrModel
        optimizer: its torch optimizer
        ctx: the ReproContext
        specs: dictionary {kind: spec} of the four configuration documents
        epoch: number of completed epochs
        history: list of dictionaries, one per completed epoch, keys PCBR_HISTORY_COLUMNS
    '''

    def __init__(self, model, optimizer, ctx, specs, epoch=0, history=None):
        self.model = model
        self.optimizer = optimizer
        self.ctx = ctx
        self.specs = specs
        self.epoch = epoch
        self.history = [] if history is None else history

    def history_frame(self):
        return pd.DataFrame(self.history, columns=PCBR_HISTORY_COLUMNS)


def build_optimizer(model, train_spec):
    '''
    One parameter group per name in PCBR_PARAM_GROUPS, in that order, each with
    its own learning rate.  SGD with momentum, or Adam.
    '''
    settings = train_spec.optimizer
    groups = model.param_groups()
    param_groups = [{'params': groups[name], 'lr': settings['learning_rates'][name], 'name': name}
                    for name in PCBR_PARAM_GROUPS]
    if settings['kind'] == 'sgd':
        return torch.optim.SGD(param_groups, momentum=settings['momentum'], weight_decay=settings['weight_decay'])
    return torch.optim.Adam(param_groups, weight_decay=settings['weight_decay'])


def trainable_groups(train_spec, epoch):
    '''
    The groups the freeze schedule leaves trainable at epoch
    '''
    for entry in train_spec.freeze_schedule:
        if entry['start'] <= epoch < entry['end']:
            return list(entry['groups'])
    raise ValueOutOfRangeException(f'Epoch {epoch} is outside the freeze schedule')


def apply_freeze(model, groups):
    '''
    Make exactly the named groups trainable.  In compatibility mode the tree
    leaves are updated without gradients, so they never require one.
    '''
    derivative_free = model.kind != PCBR_PROTOPNET and model.compatibility_mode
    for (name, params) in model.param_groups().items():
        for param in params:
            param.requires_grad_(name in groups and not (name == 'decision' and derivative_free))


def _class_masks(labels, bank):
    # [N, P] masks of active own-class and active other-class prototypes
    assignment = torch.tensor([record.class_assignment for record in bank.records], dtype=torch.long)
    active = torch.tensor([record.active for record in bank.records], dtype=torch.bool)
    own = (assignment[None, :] == labels[:, None]) & active[None, :]
    other = (assignment[None, :] != labels[:, None]) & active[None, :]
    return (own, other)


def _masked_min(values, mask):
    # per-row min over the masked entries; rows with no entry contribute 0
    masked = torch.where(mask, values, torch.full_like(values, math.inf)).min(dim=1).values
    return torch.where(torch.isinf(masked), torch.zeros_like(masked), masked)


def loss_protopnet(class_scores, labels, similarity_map, bank, cluster=0.8, separation=0.08, l1=0.0, head=None):
    '''
    cross-entropy + cluster x (mean min distance to an own-class prototype)
                  + separation x (minus mean min distance to an other-class prototype)
                  + l1 x (sum of |off-class decision weights|, only when head is given)
    Arguments:
        class_scores: ClassScores (logits) [N, K]
        labels: long tensor [N]
        similarity_map: the SimilarityMap of the batch
        bank: the PrototypeBank (its records carry class assignments and activity)
    Returns:
        (total, components): a scalar tensor and a dictionary of float components
    '''
    logits = class_scores.data
    if logits.shape[0] != labels.shape[0]:
        raise ShapeMismatchException(f'{logits.shape[0]} score rows for {labels.shape[0]} labels')
    cross_entropy = F.cross_entropy(logits, labels)
    min_distances = similarity_map.min_distances()
    (own, other) = _class_masks(labels, bank)
    cluster_cost = _masked_min(min_distances, own).mean()
    separation_cost = -_masked_min(min_distances, other).mean()
    total = cross_entropy + cluster * cluster_cost + separation * separation_cost
    l1_cost = torch.zeros((), dtype=logits.dtype)
    if head is not None and l1 > 0:
        l1_cost = (head.weights * (1 - head.class_identity.t())).abs().sum()
        total = total + l1 * l1_cost
    components = {
        'cross_entropy': cross_entropy.detach().item(),
        'cluster': cluster_cost.detach().item(),
        'separation': separation_cost.detach().item(),
        'l1': l1_cost.detach().item()
    }
    return (total, components)


def loss_prototree(class_scores, labels):
    '''
    Mean negative log-probability of the true class, the log clamped at 1e-12.
    Raises:
        ValueOutOfRangeException if the rows are not probability vectors
    '''
    probabilities = class_scores.data if isinstance(class_scores, ClassScores) else class_scores
    if bool((probabilities < 0).any()) or bool(((probabilities.sum(dim=1) - 1).abs() > 1e-6).any()):
        raise ValueOutOfRangeException('Tree class scores must be probability vectors')
    true_class = probabilities.gather(1, labels[:, None])[:, 0]
    return -torch.log(torch.clamp(true_class, min=1e-12)).mean()


def derivative_free_leaf_update(model, scores, labels, num_batches):
    '''
    The legacy leaf update for tree heads in compatibility mode: leaf mass decays
    by (1 - 1/num_batches) and gains, for every sample, its path probability
    times the leaf's probability of the true class over the model's probability
    of the true class.  Leaf logits become the log of the normalized mass.
    '''
    head = model.head
    with torch.no_grad():
        paths = path_probabilities(scores, head)
        leaves = head.leaf_distributions()
        output = paths @ leaves
        targets = F.one_hot(labels, leaves.shape[1]).to(DTYPE)
        true_probability = torch.clamp((output * targets).sum(dim=1), min=1e-12)
        update = torch.einsum('nl,nk,lk->lk', paths / true_probability[:, None], targets, leaves)
        mass = torch.clamp(leaves * (1 - 1 / num_batches) + update, min=1e-12)
        head.leaf_logits.copy_(torch.log(mass / mass.sum(dim=1, keepdim=True)))


def _batch_loss(model, batch, train_spec):
    (_, similarity_map, class_scores) = model(batch.data)
    if model.kind == PCBR_PROTOPNET:
        loss = train_spec.loss
        (total, _) = loss_protopnet(class_scores, batch.labels, similarity_map, model.bank, loss['cluster'],
                                    loss['separation'], loss['l1'], model.head)
    else:
        total = loss_prototree(class_scores, batch.labels)
    return (total, similarity_map, class_scores.data.argmax(dim=1))


def evaluate(model, dataset, transform, eval_batch_size):
    '''
    Accuracy and mean loss (cross-entropy for linear heads, NLL for trees) over a dataset.
    Returns:
        {accuracy, loss, eval_batch_size}
    '''
    correct = 0
    total_loss = 0.0
    with torch.no_grad():
        for batch in batches(dataset, eval_batch_size, transform=transform):
            (_, _, class_scores) = model(batch.data)
            if model.kind == PCBR_PROTOPNET:
                loss = F.cross_entropy(class_scores.data, batch.labels, reduction='sum')
            else:
                loss = loss_prototree(class_scores.data, batch.labels) * len(batch)
            total_loss += loss.detach().item()
            correct += int((class_scores.data.argmax(dim=1) == batch.labels).sum())
    count = max(len(dataset), 1)
    return {'accuracy': correct / count, 'loss': total_loss / count, 'eval_batch_size': eval_batch_size}


def project(model, projection_set, transform):
    '''
    Replace each active prototype by the latent vector of the projection set
    nearest to it (maximal similarity).  For linear heads only images of the
    prototype's class are searched.  Images are visited in dataset order
    (sorted by image_id) one at a time, locations in row-major order, and only
    a strictly closer patch replaces the incumbent, so ties go to the lowest
    (image_id, h, w).
    Arguments:
        model: the CbrModel (updated in place)
        projection_set: a Dataset
        transform: the TransformPipeline, applied without augmentation
    Returns:
        the updated PrototypeBank
    Raises:
        EmptyProjectionSetException if some active prototype has no candidate image
    '''
    active = model.active_prototypes()
    num_prototypes = len(model.records)
    best_distance = np.full(num_prototypes, np.inf)
    best_vector = [None] * num_prototypes
    best_source = [None] * num_prototypes
    assignment = np.array([record.class_assignment if record.class_assignment is not None else -1
                           for record in model.records])
    with torch.no_grad():
        for batch in batches(projection_set, 1, transform=transform):
            latent = model.extract(batch.data)
            distances = model.similarity(latent).distances[0].flatten(1).cpu().numpy()
            label = int(batch.labels[0])
            width = latent.shape[3]
            for p in active:
                if model.kind == PCBR_PROTOPNET and assignment[p] != label:
                    continue
                index = int(np.argmin(distances[p]))
                if distances[p, index] < best_distance[p]:
                    (h, w) = (index // width, index % width)
                    best_distance[p] = distances[p, index]
                    best_vector[p] = latent[0, :, h, w].clone()
                    best_source[p] = (batch.image_ids[0], (h, w))
        missing = [p for p in active if best_vector[p] is None]
        if len(missing) > 0:
            raise EmptyProjectionSetException(f'No projection candidates for prototypes {missing}')
        for p in active:
            model.prototypes[p].copy_(best_vector[p])
            record = model.records[p]
            (record.source_image_id, record.location) = best_source[p]
            record.projection_distance = float(best_distance[p])
    logging.info(f'Projected {len(active)} prototypes onto {len(projection_set)} images')
    return model.bank


def _prune_linear(model, weight_threshold):
    weights = model.head.weights.detach().abs().max(dim=0).values
    candidates = [p for p in model.active_prototypes() if float(weights[p]) < weight_threshold]
    if len(candidates) == len(model.active_prototypes()):
        raise AllPrunedException(f'Pruning at weight threshold {weight_threshold} would remove every prototype')
    with torch.no_grad():
        for p in candidates:
            model.head.active[p] = 0.0
            model.records[p].active = False
    return candidates


def _prune_tree(model, leaf_threshold):
    head = model.head
    bad_leaves = (head.leaf_distributions().detach().max(dim=1).values < leaf_threshold).tolist()

    def all_bad(node):
        return all(bad_leaves[leaf] for leaf in head.leaves_under(node))

    if all_bad(0):
        raise AllPrunedException(f'Pruning at leaf threshold {leaf_threshold} would remove every leaf')
    pruned = []
    # Top-down, so only maximal subtrees go.  Both children of a visited node
    # are never all bad, or the node itself would have been cut from above.
    frontier = [0]
    while len(frontier) > 0:
        node = frontier.pop(0)
        if node >= head.num_internal:
            continue
        (left, right) = (2 * node + 1, 2 * node + 2)
        override = int(head.routing_override[node])
        if override != -1:
            frontier.append(right if override == 1 else left)
            continue
        if all_bad(left):
            (cut, route, keep) = (left, 1, right)
        elif all_bad(right):
            (cut, route, keep) = (right, 0, left)
        else:
            frontier.extend([left, right])
            continue
        head.routing_override[node] = route
        for j in [node] + head.internal_under(cut):
            if bool(head.node_active[j]):
                head.node_active[j] = False
                prototype = int(head.node_to_prototype[j])
                model.records[prototype].active = False
                pruned.append(prototype)
        frontier.append(keep)
    return sorted(pruned)


def prune(model, pruning, eval_batch=None):
    '''
    Deactivate prototypes.  Linear heads: prototypes whose largest absolute
    decision weight is below pruning['weight_threshold'].  Trees: every maximal
    subtree whose leaves all have max class probability below
    pruning['leaf_threshold'] is cut off; its parent always routes to the
    sibling, and the parent's and the subtree's prototypes become inactive.
    Arguments:
        model: the CbrModel (updated in place)
        pruning: the pruning block of a TrainSpec
        eval_batch: optional ImageBatch on which the change of class scores is measured
    Returns:
        {'pruned': prototype indices, 'delta': max |change of class scores| or None}
    Raises:
        AllPrunedException if every prototype would go
    '''
    before = None
    if eval_batch is not None:
        with torch.no_grad():
            before = model(eval_batch.data)[2].data.clone()
    if model.kind == PCBR_PROTOPNET:
        pruned = _prune_linear(model, pruning['weight_threshold'])
    else:
        pruned = _prune_tree(model, pruning['leaf_threshold'])
    delta = None
    if before is not None:
        with torch.no_grad():
            delta = float((model(eval_batch.data)[2].data - before).abs().max())
    logging.info(f'Pruned {len(pruned)} prototypes {pruned}; class score change {delta}')
    return {'pruned': pruned, 'delta': delta}


def _check_finite(loss, epoch, batch):
    if not bool(torch.isfinite(loss)):
        message = f'Non-finite loss {loss.detach().item()} at epoch {epoch} on images {batch.image_ids[:5]}...'
        logging.error(message)
        raise NonFiniteLossException(message)


def _finish(state, dataset, transform, eval_batch):
    # project, prune, and re-project if pruning removed anything
    train_spec = state.specs['train']
    project(state.model, dataset, transform)
    if train_spec.pruning['enabled']:
        report = prune(state.model, train_spec.pruning, eval_batch)
        if len(report['pruned']) > 0:
            project(state.model, dataset, transform)


def write_history(state, out_dir):
    state.history_frame().to_csv(os.path.join(out_dir, 'history.csv'), index=False)


def train(model, specs, repro_ctx, out_dir=None, dataset=None, eval_dataset=None, state=None):
    '''
    Train a model.  Each epoch applies the freeze schedule, iterates the
    training set in an order drawn from the shuffle substream with augmentation
    from the augment substream, and records loss and accuracy.  At
    projection_epoch the prototypes are projected; after the last epoch they are
    projected again, pruned if configured, and re-projected if pruning removed any.
    Arguments:
        model: a CbrModel
        specs: dictionary {kind: spec}
        repro_ctx: the ReproContext
        out_dir: the training directory (configs already snapshot there); None writes nothing
        dataset, eval_dataset: override the data document's train and test sets
        state: a TrainState to resume from (model and repro_ctx are then taken from it)
    Returns:
        the final TrainState
    Raises:
        NonFiniteLossException: the run is aborted
        OSError if out_dir is unwritable
    '''
    from pcbr.pcbr_persistence import save_checkpoint

    (data_spec, train_spec) = (specs['data'], specs['train'])
    if model.spec.num_classes != data_spec.num_classes:
        raise ShapeMismatchException(f'Model has {model.spec.num_classes} classes, data has {data_spec.num_classes}')
    if state is None:
        state = TrainState(model, build_optimizer(model, train_spec), repro_ctx, specs)
    model = state.model
    ctx = state.ctx
    dataset = load_dataset(data_spec) if dataset is None else dataset
    eval_dataset = load_dataset(data_spec, 'test_set') if eval_dataset is None else eval_dataset
    transform = TransformPipeline(data_spec.transform, ctx.stream('augment'))
    eval_transform = TransformPipeline(data_spec.transform)
    ctx.record_batch_sizes(data_spec.batch_size, data_spec.eval_batch_size)
    num_batches = max(1, math.ceil(len(dataset) / data_spec.batch_size))
    eval_batch = next(batches(dataset, data_spec.eval_batch_size, transform=eval_transform), None)
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)

    starting_epoch = state.epoch
    for epoch in range(state.epoch, train_spec.num_epochs):
        groups = trainable_groups(train_spec, epoch)
        apply_freeze(model, groups)
        model.train()
        (loss_sum, correct, seen) = (0.0, 0, 0)
        for batch in batches(dataset, data_spec.batch_size, True, ctx.stream('shuffle'), transform, augment=True):
            state.optimizer.zero_grad(set_to_none=True)
            (loss, similarity_map, predictions) = _batch_loss(model, batch, train_spec)
            _check_finite(loss, epoch, batch)
            loss.backward()
            state.optimizer.step()
            if model.kind != PCBR_PROTOPNET and model.compatibility_mode and 'decision' in groups:
                derivative_free_leaf_update(model, similarity_map.scores.detach(), batch.labels, num_batches)
            loss_sum += loss.detach().item() * len(batch)
            correct += int((predictions == batch.labels).sum())
            seen += len(batch)
        model.eval()
        eval_accuracy = evaluate(model, eval_dataset, eval_transform, data_spec.eval_batch_size)['accuracy'] \
            if eval_dataset is not None else float('nan')
        if epoch == train_spec.projection_epoch:
            project(model, dataset, eval_transform)
        state.epoch = epoch + 1
        state.history.append({'epoch': state.epoch, 'loss': loss_sum / seen, 'train_accuracy': correct / seen,
                              'eval_accuracy': eval_accuracy})
        logging.info(f'epoch {state.epoch}/{train_spec.num_epochs} loss {loss_sum / seen:.6f} '
                     f'train_accuracy {correct / seen:.4f} eval_accuracy {eval_accuracy:.4f} groups {groups}')
        if out_dir is not None and train_spec.checkpoint_every > 0 and state.epoch % train_spec.checkpoint_every == 0 \
                and state.epoch < train_spec.num_epochs:
            write_history(state, out_dir)
            save_checkpoint(state, os.path.join(out_dir, 'checkpoints', f'epoch_{state.epoch}'))

    model.eval()
    if state.epoch > starting_epoch and state.epoch == train_spec.num_epochs:
        _finish(state, dataset, eval_transform, eval_batch)
    if out_dir is not None:
        write_history(state, out_dir)
        save_checkpoint(state, os.path.join(out_dir, 'final'))
    return state
