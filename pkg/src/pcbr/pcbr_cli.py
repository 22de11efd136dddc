'''
The pcbr command line.  Subcommands:
    train      build a model from the four configuration documents and train it
    evaluate   accuracy and loss of a checkpoint on a data set
    explain    render the prototypes behind one decision (--image) or every prototype's source patch (--global)
    benchmark  run the pointing game or the perturbation benchmark
    import     convert a legacy ProtoPNet/ProtoTree model into a native checkpoint
    project    project the prototypes of a checkpoint onto a data set
    prune      prune a checkpoint
Every command prints one JSON line on stdout and logs to stderr.  Exit codes:
0 success, 1 user error (bad arguments, bad configuration, unreadable files),
2 internal error.
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

import argparse
import logging
import math
import os
import sys
import traceback

import torch

from pcbr.pcbr_utils import DTYPE, PCBR_PROTOPNET, PCBRException, ShapeMismatchException, json_line
from pcbr.pcbr_config import load_config, parse_config, snapshot_configs
from pcbr.pcbr_repro import init_repro
from pcbr.pcbr_data import TransformPipeline, batches, load_dataset, read_image
from pcbr.pcbr_model import build_model, greedy_path
from pcbr.pcbr_train import train, evaluate, project, prune
from pcbr.pcbr_attribution import compute_attribution, attribution_rng, render_view, save_view
from pcbr.pcbr_metrics import pointing_game, perturbation_benchmark, write_results
from pcbr.pcbr_persistence import PCBR_LEGACY_FORMATS, load_checkpoint, save_checkpoint, import_legacy, import_state

PCBR_METRICS = ['pointing_game', 'perturbation']


class UsageException(PCBRException):
    '''
    Bad command-line arguments
    '''


class _ArgumentParser(argparse.ArgumentParser):
    # argparse exits 2 on bad arguments; those are user errors here
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageException(f'{self.prog}: {message}')


def _output_dir(args, default_name):
    if args.out is not None:
        return args.out
    return os.path.join(os.environ.get('PCBR_OUTPUT_ROOT', '.'), default_name)


def _finite_or_none(value):
    return None if isinstance(value, float) and math.isnan(value) else value


def _open_checkpoint(args):
    state = load_checkpoint(args.checkpoint, getattr(args, 'override_hash', False))
    if getattr(args, 'data', None) is not None:
        data_spec = load_config(args.data, 'data')
        if data_spec.num_classes != state.model.spec.num_classes:
            raise ShapeMismatchException(f'Model has {state.model.spec.num_classes} classes, '
                                         f'{args.data} has {data_spec.num_classes}')
        state.specs['data'] = data_spec
    if getattr(args, 'viz', None) is not None:
        state.specs['viz'] = load_config(args.viz, 'viz')
    return state


def _evaluation_set(data_spec):
    # the held-out set when there is one
    test_set = load_dataset(data_spec, 'test_set')
    return test_set if test_set is not None else load_dataset(data_spec)


def _write_derived(state, out_dir):
    snapshot_configs(state.specs, out_dir)
    state.ctx.write_seed(out_dir)
    checkpoint = os.path.join(out_dir, 'final')
    save_checkpoint(state, checkpoint)
    return checkpoint


def cmd_train(args):
    '''
    Train from configuration files into a training directory
    '''
    specs = {
        'model': load_config(args.model, 'model'),
        'data': load_config(args.data, 'data'),
        'train': load_config(args.training, 'train'),
        'viz': load_config(args.viz, 'viz') if args.viz is not None else parse_config(None, 'viz')
    }
    if args.seed is not None and args.seed != specs['train'].seed:
        logging.warning(f'--seed {args.seed} overrides seed {specs["train"].seed} of {args.training}')
        specs['train'] = specs['train'].replace('seed', args.seed)
    if specs['model'].num_classes != specs['data'].num_classes:
        raise ShapeMismatchException(f'{args.model} has {specs["model"].num_classes} classes, '
                                     f'{args.data} has {specs["data"].num_classes}')
    out_dir = _output_dir(args, 'train')
    ctx = init_repro(specs['train'].seed)
    model = build_model(specs['model'], ctx.stream('init'))
    snapshot_configs(specs, out_dir)
    ctx.write_seed(out_dir)
    state = train(model, specs, ctx, out_dir)
    last = state.history[-1] if len(state.history) > 0 else {}
    return {
        'command': 'train',
        'out': out_dir,
        'checkpoint': os.path.join(out_dir, 'final'),
        'epochs': state.epoch,
        'train_accuracy': last.get('train_accuracy'),
        'eval_accuracy': _finite_or_none(last.get('eval_accuracy')),
        'active_prototypes': len(state.model.active_prototypes())
    }


def cmd_evaluate(args):
    '''
    Accuracy and loss of a checkpoint; eval_batch_size is always reported
    '''
    state = _open_checkpoint(args)
    data_spec = state.specs['data']
    result = evaluate(state.model, _evaluation_set(data_spec), TransformPipeline(data_spec.transform),
                      data_spec.eval_batch_size)
    return dict(result, command='evaluate')


def _safe_name(image_id):
    return image_id.replace('/', '__').replace(os.sep, '__')


def _explanation_prototypes(model, x, top_k):
    # protopnet: top-k score x weight contributions to the predicted class; prototree: the greedy path
    with torch.no_grad():
        (_, similarity_map, class_scores) = model(x)
    scores = similarity_map.scores[0]
    predicted = int(class_scores.data[0].argmax())
    if model.kind == PCBR_PROTOPNET:
        contributions = (scores * model.head.effective_weights()[predicted]).tolist()
        ranked = sorted(model.active_prototypes(), key=lambda p: (-contributions[p], p))
        return (predicted, [{'prototype_index': p, 'contribution': contributions[p]} for p in ranked[:top_k]])
    return (predicted, [{'prototype_index': p, 'node': node, 'went_right': right, 'score': float(scores[p])}
                        for (node, p, right) in greedy_path(scores, model.head)])


def _find_image(image, data_spec):
    if os.path.isfile(image):
        size = data_spec.train_set['params'].get('image_size', 32)
        return (read_image(image, size), os.path.splitext(os.path.basename(image))[0])
    for which in ['train_set', 'test_set']:
        dataset = load_dataset(data_spec, which)
        if dataset is not None and image in dataset.image_ids():
            item = dataset.find(image)
            return (item.image, item.image_id)
    raise PCBRException(f'{image} is neither an image file nor an image id of the data sets')


def _explain_one(model, raw_image, image_id, p, viz, transform, ctx, path):
    x = torch.from_numpy(transform(raw_image)[None]).to(DTYPE)
    attribution = compute_attribution(model, x[0], p, viz, attribution_rng(ctx, viz, image_id, p), image_id)
    sidecar = save_view(render_view(attribution, raw_image, viz), attribution, path)
    return dict(sidecar, path=path)


def cmd_explain(args):
    '''
    Local explanation of one image, or the global view of every active prototype
    '''
    state = _open_checkpoint(args)
    (model, viz, data_spec) = (state.model, state.specs['viz'], state.specs['data'])
    transform = TransformPipeline(data_spec.transform)
    if args.use_global:
        out_dir = _output_dir(args, 'explain_global')
        dataset = load_dataset(data_spec)
        views = []
        for p in model.active_prototypes():
            record = model.records[p]
            if record.source_image_id is None:
                raise PCBRException(f'Prototype {p} has not been projected; project it first')
            item = dataset.find(record.source_image_id)
            views.append(_explain_one(model, item.image, item.image_id, p, viz, transform, state.ctx,
                                      os.path.join(out_dir, f'prototype_{p:04d}.png')))
        return {'command': 'explain', 'mode': 'global', 'out': out_dir, 'views': views}

    (raw_image, image_id) = _find_image(args.image, data_spec)
    out_dir = _output_dir(args, 'explain')
    x = torch.from_numpy(transform(raw_image)[None]).to(DTYPE)
    (predicted, decision) = _explanation_prototypes(model, x, viz.explain['top_k'])
    for entry in decision:
        p = entry['prototype_index']
        path = os.path.join(out_dir, _safe_name(image_id), f'prototype_{p:04d}.png')
        entry.update(_explain_one(model, raw_image, image_id, p, viz, transform, state.ctx, path))
    return {'command': 'explain', 'mode': 'local', 'image_id': image_id, 'predicted_class': predicted,
            'out': out_dir, 'views': decision}


def cmd_benchmark(args):
    '''
    Run one of the faithfulness metrics and write results.csv and summary.json
    '''
    state = _open_checkpoint(args)
    (viz, data_spec) = (state.specs['viz'], state.specs['data'])
    dataset = _evaluation_set(data_spec)
    transform = TransformPipeline(data_spec.transform)
    if args.metric == 'pointing_game':
        (frame, summary) = pointing_game(state.model, dataset, viz, transform, state.ctx)
    else:
        (frame, summary) = perturbation_benchmark(state.model, dataset, viz, transform, state.ctx)
    out_dir = _output_dir(args, f'benchmark_{args.metric}')
    write_results(frame, summary, out_dir)
    return {'command': 'benchmark', 'metric': args.metric, 'out': out_dir, 'rows': len(frame), 'summary': summary}


def cmd_import(args):
    '''
    Import a legacy model into a native model directory
    '''
    model = import_legacy(args.path, args.format)
    data_spec = parse_config(None, 'data').replace('num_classes', model.spec.num_classes)
    specs = {'model': model.spec, 'data': data_spec, 'train': parse_config(None, 'train'),
             'viz': parse_config(None, 'viz')}
    state = import_state(model, specs)
    out_dir = _output_dir(args, 'import')
    checkpoint = _write_derived(state, out_dir)
    return {'command': 'import', 'format': args.format, 'out': out_dir, 'checkpoint': checkpoint,
            'num_prototypes': len(model.records), 'num_classes': model.spec.num_classes}


def cmd_project(args):
    '''
    Project a checkpoint's prototypes onto the training set of the data document
    '''
    state = _open_checkpoint(args)
    data_spec = state.specs['data']
    bank = project(state.model, load_dataset(data_spec), TransformPipeline(data_spec.transform))
    out_dir = _output_dir(args, 'project')
    checkpoint = _write_derived(state, out_dir)
    return {'command': 'project', 'out': out_dir, 'checkpoint': checkpoint,
            'records': [record.to_dict() for record in bank.records]}


def cmd_prune(args):
    '''
    Prune a checkpoint with the thresholds of its training document
    '''
    state = _open_checkpoint(args)
    data_spec = state.specs['data']
    transform = TransformPipeline(data_spec.transform)
    eval_batch = next(batches(load_dataset(data_spec), data_spec.eval_batch_size, transform=transform), None)
    report = prune(state.model, state.specs['train'].pruning, eval_batch)
    out_dir = _output_dir(args, 'prune')
    checkpoint = _write_derived(state, out_dir)
    return dict(report, command='prune', out=out_dir, checkpoint=checkpoint,
                active_prototypes=len(state.model.active_prototypes()))


def build_parser():
    parser = _ArgumentParser(prog='pcbr', description='Prototype case-based reasoning classifiers')
    parser.add_argument('--log-level', default=os.environ.get('PCBR_LOG_LEVEL', 'INFO'),
                        choices=['DEBUG', 'INFO', 'WARNING', 'ERROR'])
    commands = parser.add_subparsers(dest='command', required=True)

    train_parser = commands.add_parser('train', help='train a model')
    train_parser.add_argument('--model', required=True)
    train_parser.add_argument('--data', required=True)
    train_parser.add_argument('--training', required=True)
    train_parser.add_argument('--viz')
    train_parser.add_argument('--out')
    train_parser.add_argument('--seed', type=int)
    train_parser.set_defaults(handler=cmd_train)

    def checkpoint_parser(name, summary, handler, data=True):
        sub = commands.add_parser(name, help=summary)
        sub.add_argument('--checkpoint', required=True)
        sub.add_argument('--override-hash', dest='override_hash', action='store_true')
        if data:
            sub.add_argument('--data')
        sub.add_argument('--out')
        sub.set_defaults(handler=handler)
        return sub

    checkpoint_parser('evaluate', 'evaluate a checkpoint', cmd_evaluate)
    explain_parser = checkpoint_parser('explain', 'explain a decision or the prototypes', cmd_explain)
    explain_parser.add_argument('--viz')
    target = explain_parser.add_mutually_exclusive_group(required=True)
    target.add_argument('--image')
    target.add_argument('--global', dest='use_global', action='store_true')
    benchmark_parser = checkpoint_parser('benchmark', 'run a faithfulness metric', cmd_benchmark)
    benchmark_parser.add_argument('--viz')
    benchmark_parser.add_argument('--metric', required=True, choices=PCBR_METRICS)
    checkpoint_parser('project', 'project the prototypes of a checkpoint', cmd_project)
    checkpoint_parser('prune', 'prune a checkpoint', cmd_prune)

    import_parser = commands.add_parser('import', help='import a legacy model')
    import_parser.add_argument('--path', required=True)
    import_parser.add_argument('--format', required=True)
    import_parser.add_argument('--out')
    import_parser.set_defaults(handler=cmd_import)
    return parser


def _log_and_abort(message, code=1):
    '''
    Log the error message and return the exit code.  Internal use only
    '''
    logging.error(message)
    return code


def main(argv=None):
    '''
    Run one command.  Returns the exit code
    '''
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageException as error:
        logging.basicConfig(stream=sys.stderr, force=True)
        return _log_and_abort(error.message)
    logging.basicConfig(stream=sys.stderr, level=getattr(logging, args.log_level), force=True,
                        format='%(asctime)s %(levelname)s %(message)s')
    if args.command == 'import' and args.format not in PCBR_LEGACY_FORMATS:
        return _log_and_abort(f'Unknown legacy format {args.format}; formats are {PCBR_LEGACY_FORMATS}')
    try:
        result = args.handler(args)
    except PCBRException as error:
        return _log_and_abort(f'{type(error).__name__}: {error.message}')
    except OSError as error:
        return _log_and_abort(f'{type(error).__name__}: {error}')
    except Exception:
        traceback.print_exc(file=sys.stderr)
        return 2
    sys.stdout.write(json_line(result) + '\n')
    sys.stdout.flush()
    return 0


if __name__ == '__main__':
    sys.exit(main())
