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
Tests for the losses, the freeze schedule, projection, pruning and the training loop
'''

import math
import os
import warnings

import numpy as np
import pandas as pd
import pytest
import torch

from pcbr import TrainState, build_optimizer, trainable_groups, apply_freeze, loss_protopnet, loss_prototree
from pcbr import evaluate, project, prune, train, init_repro, build_model, batches
from pcbr import ClassScores, SimilarityMap, PrototypeBank, PrototypeRecord, DTYPE
from pcbr import NonFiniteLossException, EmptyProjectionSetException, AllPrunedException
from pcbr import ValueOutOfRangeException, ShapeMismatchException
from tiny_configs import make_specs


def _train_tiny(specs, seed=0, out_dir=None):
    ctx = init_repro(seed)
    model = build_model(specs['model'], ctx.stream('init'))
    return train(model, specs, ctx, out_dir)


def test_protopnet_loss_components():
    records = [PrototypeRecord(class_assignment=0), PrototypeRecord(class_assignment=1)]
    bank = PrototypeBank(torch.zeros(2, 3, dtype=DTYPE), records)
    distances = torch.tensor([[[[1.0, 2.0]], [[4.0, 5.0]]]], dtype=DTYPE)
    similarity_map = SimilarityMap(-distances, distances)
    logits = torch.tensor([[2.0, 0.5]], dtype=DTYPE)
    labels = torch.tensor([0])
    (total, components) = loss_protopnet(ClassScores(logits), labels, similarity_map, bank, 0.8, 0.08)
    cross_entropy = -math.log(math.exp(2.0) / (math.exp(2.0) + math.exp(0.5)))
    assert components['cross_entropy'] == pytest.approx(cross_entropy)
    assert components['cluster'] == pytest.approx(1.0)
    assert components['separation'] == pytest.approx(-4.0)
    assert components['l1'] == 0.0
    assert float(total) == pytest.approx(cross_entropy + 0.8 - 0.32)
    # inactive prototypes are not candidates; a row with none contributes 0
    records[1].active = False
    (_, components) = loss_protopnet(ClassScores(logits), labels, similarity_map, bank, 0.8, 0.08)
    assert components['separation'] == 0.0
    with pytest.raises(ShapeMismatchException):
        loss_protopnet(ClassScores(logits), torch.tensor([0, 1]), similarity_map, bank)


def test_protopnet_l1(tiny_model):
    (_, similarity_map, scores) = tiny_model(torch.zeros(2, 3, 16, 16, dtype=DTYPE))
    labels = torch.tensor([0, 2])
    (_, components) = loss_protopnet(scores, labels, similarity_map, tiny_model.bank, l1=1e-4, head=tiny_model.head)
    # 6 prototypes x 2 other classes x |-0.5|
    assert components['l1'] == pytest.approx(6.0)


def test_loss_components_do_not_warn(tiny_model):
    (_, similarity_map, scores) = tiny_model(torch.zeros(2, 3, 16, 16, dtype=DTYPE))
    with warnings.catch_warnings():
        warnings.simplefilter('error')
        (total, components) = loss_protopnet(scores, torch.tensor([0, 2]), similarity_map, tiny_model.bank, l1=1e-4,
                                             head=tiny_model.head)
    assert total.requires_grad
    assert all(isinstance(value, float) for value in components.values())


def test_prototree_loss():
    probabilities = torch.tensor([[0.2, 0.8], [1.0, 0.0]], dtype=DTYPE)
    loss = loss_prototree(ClassScores(probabilities), torch.tensor([1, 1]))
    assert float(loss) == pytest.approx((-math.log(0.8) - math.log(1e-12)) / 2)
    with pytest.raises(ValueOutOfRangeException):
        loss_prototree(torch.tensor([[0.7, 0.7]], dtype=DTYPE), torch.tensor([0]))


def test_freeze_schedule(tiny_model):
    spec = make_specs(train={'num_epochs': 3, 'projection_epoch': 1, 'freeze_schedule': [
        {'start': 0, 'end': 1, 'groups': ['add_on', 'prototypes']},
        {'start': 1, 'end': 3, 'groups': ['decision']}]})['train']
    assert trainable_groups(spec, 0) == ['add_on', 'prototypes']
    assert trainable_groups(spec, 2) == ['decision']
    with pytest.raises(ValueOutOfRangeException):
        trainable_groups(spec, 3)
    apply_freeze(tiny_model, ['add_on', 'prototypes'])
    groups = tiny_model.param_groups()
    assert not any(param.requires_grad for param in groups['backbone'])
    assert all(param.requires_grad for param in groups['add_on'])
    assert tiny_model.prototypes.requires_grad
    assert not tiny_model.head.weights.requires_grad


def test_frozen_groups_stay_bitwise_unchanged(tiny_model):
    sgd = {'optimizer': {'kind': 'sgd', 'momentum': 0.9, 'weight_decay': 0.01}}
    # momentum buffers and weight decay from an earlier trainable step must not move frozen groups
    optimizer = build_optimizer(tiny_model, make_specs(train=sgd)['train'])
    images = torch.from_numpy(np.random.default_rng(2).random((4, 3, 16, 16)))
    labels = torch.tensor([0, 1, 2, 0])

    def step():
        optimizer.zero_grad(set_to_none=True)
        (_, similarity_map, scores) = tiny_model(images)
        loss_protopnet(scores, labels, similarity_map, tiny_model.bank)[0].backward()
        optimizer.step()

    apply_freeze(tiny_model, ['backbone', 'add_on', 'prototypes', 'decision'])
    step()
    apply_freeze(tiny_model, ['add_on', 'prototypes', 'decision'])
    before = [param.detach().clone() for param in tiny_model.backbone.parameters()]
    prototypes = tiny_model.prototypes.detach().clone()
    step()
    step()
    assert all(torch.equal(a, b.detach()) for (a, b) in zip(before, tiny_model.backbone.parameters()))
    assert not torch.equal(prototypes, tiny_model.prototypes.detach())


def test_training_never_moves_frozen_groups():
    document = {'num_epochs': 3, 'projection_epoch': -1,
                'optimizer': {'kind': 'sgd', 'momentum': 0.9, 'weight_decay': 0.01},
                'freeze_schedule': [{'start': 0, 'end': 1, 'groups': ['decision']},
                                    {'start': 1, 'end': 3, 'groups': ['add_on', 'prototypes', 'decision']}]}
    specs = make_specs(train=document)
    model = build_model(specs['model'], init_repro(0).stream('init'))
    before = {name: param.detach().clone() for (name, param) in model.backbone.named_parameters()}
    state = _train_tiny(specs)
    for (name, param) in state.model.backbone.named_parameters():
        assert torch.equal(param.detach(), before[name]), name


def test_optimizer_groups(tiny_model):
    document = {'optimizer': {'kind': 'sgd', 'momentum': 0.5,
                              'learning_rates': {'backbone': 0.1, 'add_on': 0.2, 'prototypes': 0.3, 'decision': 0.4}}}
    optimizer = build_optimizer(tiny_model, make_specs(train=document)['train'])
    assert isinstance(optimizer, torch.optim.SGD)
    assert [group['name'] for group in optimizer.param_groups] == ['backbone', 'add_on', 'prototypes', 'decision']
    assert [group['lr'] for group in optimizer.param_groups] == [0.1, 0.2, 0.3, 0.4]
    assert isinstance(build_optimizer(tiny_model, make_specs()['train']), torch.optim.Adam)


def _brute_force_projection(model, dataset, transform, original):
    # for each prototype, scan every eligible patch for the nearest one
    expected = {}
    with torch.no_grad():
        for item in dataset:
            latent = model.extract(torch.from_numpy(transform(item.image))[None].to(DTYPE))[0].numpy()
            for p in range(original.shape[0]):
                if model.records[p].class_assignment is not None and model.records[p].class_assignment != item.label:
                    continue
                for h in range(latent.shape[1]):
                    for w in range(latent.shape[2]):
                        distance = float(((latent[:, h, w] - original[p]) ** 2).sum())
                        if p not in expected or distance < expected[p][0] - 1e-12:
                            expected[p] = (distance, item.image_id, (h, w), latent[:, h, w].copy())
    return expected


def test_projection_matches_brute_force(tiny_model, tiny_dataset, tiny_transform):
    original = tiny_model.prototypes.detach().numpy().copy()
    expected = _brute_force_projection(tiny_model, tiny_dataset, tiny_transform, original)
    bank = project(tiny_model, tiny_dataset, tiny_transform)
    for (p, record) in enumerate(bank.records):
        (distance, image_id, location, vector) = expected[p]
        assert record.source_image_id == image_id
        assert record.location == location
        assert record.projection_distance == pytest.approx(distance, abs=1e-9)
        assert np.allclose(bank.vectors[p].detach().numpy(), vector)
        assert tiny_dataset.find(image_id).label == record.class_assignment
    # a projected prototype is at distance 0 from its source patch
    source = tiny_dataset.find(bank.records[0].source_image_id)
    with torch.no_grad():
        latent = tiny_model.extract(torch.from_numpy(tiny_transform(source.image))[None].to(DTYPE))
        distances = tiny_model.similarity(latent).distances[0, 0]
    (h, w) = bank.records[0].location
    assert float(distances[h, w]) == pytest.approx(0.0, abs=1e-10)


def test_projection_is_idempotent(tree_model, tiny_dataset, tiny_transform):
    project(tree_model, tiny_dataset, tiny_transform)
    first = tree_model.prototypes.detach().clone()
    records = [record.to_dict() for record in tree_model.records]
    project(tree_model, tiny_dataset, tiny_transform)
    assert torch.equal(tree_model.prototypes.detach(), first)
    assert [record['source_image_id'] for record in records] == \
        [record.source_image_id for record in tree_model.records]


def test_projection_needs_candidates(tiny_model, tiny_dataset, tiny_transform):
    only_circles = tiny_dataset.subset([i for (i, item) in enumerate(tiny_dataset) if item.label == 0])
    with pytest.raises(EmptyProjectionSetException):
        project(tiny_model, only_circles, tiny_transform)
    # pruned prototypes need no candidates
    for p in range(2, 6):
        tiny_model.records[p].active = False
    project(tiny_model, only_circles, tiny_transform)
    assert tiny_model.records[2].source_image_id is None


def test_linear_pruning(tiny_model, tiny_dataset, tiny_transform):
    batch = next(batches(tiny_dataset, 4, transform=tiny_transform))
    with torch.no_grad():
        tiny_model.head.weights[:, 1] = 1e-4
    report = prune(tiny_model, {'enabled': True, 'weight_threshold': 1e-3, 'leaf_threshold': 0.01}, batch)
    assert report['pruned'] == [1]
    assert report['delta'] >= 0
    assert not tiny_model.records[1].active
    assert float(tiny_model.head.active[1]) == 0.0
    # pruning a prototype is the same as zeroing its score
    with torch.no_grad():
        (_, similarity_map, scores) = tiny_model(batch.data)
        masked = similarity_map.scores.clone()
        masked[:, 1] = 0
        assert torch.allclose(scores.data, masked @ tiny_model.head.weights.t())
    with pytest.raises(AllPrunedException):
        prune(tiny_model, {'enabled': True, 'weight_threshold': 10.0, 'leaf_threshold': 0.01})


def test_tree_pruning(tree_model):
    with torch.no_grad():
        tree_model.head.leaf_logits.zero_()
        tree_model.head.leaf_logits[2] = torch.tensor([4.0, 0.0, 0.0], dtype=DTYPE)
        tree_model.head.leaf_logits[3] = torch.tensor([0.0, 0.0, 4.0], dtype=DTYPE)
    report = prune(tree_model, {'enabled': True, 'weight_threshold': 1e-3, 'leaf_threshold': 0.5})
    # leaves 0 and 1 are uniform, so the root always routes right
    assert report['pruned'] == [0, 1]
    assert report['delta'] is None
    assert tree_model.head.routing_override.tolist() == [1, -1, -1]
    assert tree_model.head.node_active.tolist() == [False, False, True]
    assert tree_model.active_prototypes() == [2]
    with pytest.raises(AllPrunedException):
        prune(tree_model, {'enabled': True, 'weight_threshold': 1e-3, 'leaf_threshold': 0.99})


def test_evaluate(tiny_model, tiny_dataset, tiny_transform):
    result = evaluate(tiny_model, tiny_dataset, tiny_transform, 16)
    assert 0.0 <= result['accuracy'] <= 1.0
    assert result['loss'] > 0
    assert result['eval_batch_size'] == 16


def test_training_is_deterministic():
    specs = make_specs()
    first = _train_tiny(specs)
    second = _train_tiny(specs)
    assert first.epoch == 2
    assert len(first.history) == 2
    for ((name, a), (_, b)) in zip(first.model.state_dict().items(), second.model.state_dict().items()):
        assert torch.equal(a, b), name
    assert first.history_frame().equals(second.history_frame())
    assert [record.to_dict() for record in first.model.records] == [record.to_dict() for record in second.model.records]
    # training ends with projected prototypes
    assert all(record.source_image_id is not None for record in first.model.records)


def test_training_writes_outputs(tmp_path):
    state = _train_tiny(make_specs(train={'checkpoint_every': 1}), out_dir=str(tmp_path))
    assert os.path.isdir(tmp_path / 'final')
    assert os.path.isdir(tmp_path / 'checkpoints' / 'epoch_1')
    assert not os.path.exists(tmp_path / 'checkpoints' / 'epoch_2')
    history = pd.read_csv(tmp_path / 'history.csv')
    assert list(history.columns) == ['epoch', 'loss', 'train_accuracy', 'eval_accuracy']
    assert history['epoch'].tolist() == [1, 2]
    assert state.ctx.batch_sizes == {'batch_size': 8, 'eval_batch_size': 16}


def test_zero_epochs_leaves_model_alone():
    specs = make_specs(train={'num_epochs': 0})
    ctx = init_repro(0)
    model = build_model(specs['model'], ctx.stream('init'))
    before = model.prototypes.detach().clone()
    state = train(model, specs, ctx)
    assert state.epoch == 0
    assert torch.equal(model.prototypes.detach(), before)


def test_tree_training():
    state = _train_tiny(make_specs('prototree'))
    leaves = state.model.head.leaf_distributions()
    assert torch.allclose(leaves.sum(dim=1), torch.ones(4, dtype=DTYPE))
    assert not torch.allclose(leaves, torch.full_like(leaves, 1 / 3))


def test_compatibility_tree_leaves_update_without_gradients():
    specs = make_specs('prototree', model={'compatibility_mode': True}, train={'num_epochs': 1, 'projection_epoch': 0})
    state = _train_tiny(specs)
    head = state.model.head
    assert not head.leaf_logits.requires_grad
    leaves = head.leaf_distributions()
    assert torch.allclose(leaves.sum(dim=1), torch.ones(4, dtype=DTYPE))
    assert not torch.allclose(leaves, torch.full_like(leaves, 1 / 3))


def test_non_finite_loss_aborts():
    specs = make_specs()
    ctx = init_repro(0)
    model = build_model(specs['model'], ctx.stream('init'))
    with torch.no_grad():
        model.prototypes.fill_(float('nan'))
    with pytest.raises(NonFiniteLossException):
        train(model, specs, ctx)


def test_class_count_must_agree():
    specs = make_specs(data={'num_classes': 4})
    ctx = init_repro(0)
    model = build_model(specs['model'], ctx.stream('init'))
    with pytest.raises(ShapeMismatchException):
        train(model, specs, ctx)
