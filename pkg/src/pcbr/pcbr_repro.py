'''
Reproducibility: a master seed, named RNG substreams derived from it, exact
capture and restore of every RNG state, and a record of the software and
hardware a run used.

Substream derivation: the substream called name is a numpy PCG64 generator
seeded with hash64(master_seed, name), the little-endian integer made of the
first eight bytes of SHA-256(f'{master_seed}:{name}').  A child substream for
task i of stream name (see ReproContext.spawn) uses hash64(master_seed, f'{name}/{i}').
Child streams are never captured; they are rederived on demand.
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
import os
import platform
import struct
import sys

import numpy as np
import pandas as pd
import torch

from pcbr.pcbr_utils import PCBR_SUBSTREAMS, PCBRException, SchemaMismatchException, CorruptFileException
from pcbr.pcbr_utils import hash64

_RNG_MAGIC = b'PCBRRNG1'
_MASK64 = (1 << 64) - 1


def _generator(seed):
    return np.random.Generator(np.random.PCG64(seed))


class RngSnapshot:
    '''
    The captured state of every named substream plus torch's global RNG.
    Serializes to a fixed little-endian binary form (to_bytes/from_bytes):
        magic b'PCBRRNG1', u32 substream count, then per substream in sorted name
        order: u16 name length, name (utf-8), u64 state low, u64 state high,
        u64 inc low, u64 inc high, u8 has_uint32, u32 uinteger; then u32 length
        and the raw bytes of the torch RNG state.
    Arguments:
        states: dictionary name -> PCG64 state dictionary (bit_generator.state)
        torch_state: bytes of torch.get_rng_state()
    '''

    def __init__(self, states, torch_state):
        self.states = states
        self.torch_state = torch_state

    def names(self):
        return sorted(self.states.keys())

    def to_bytes(self):
        parts = [_RNG_MAGIC, struct.pack('<I', len(self.states))]
        for name in self.names():
            state = self.states[name]
            encoded = name.encode('utf-8')
            inner = state['state']
            parts.append(struct.pack('<H', len(encoded)))
            parts.append(encoded)
            parts.append(struct.pack('<QQQQBI',
                                     inner['state'] & _MASK64, inner['state'] >> 64,
                                     inner['inc'] & _MASK64, inner['inc'] >> 64,
                                     int(state['has_uint32']), int(state['uinteger'])))
        parts.append(struct.pack('<I', len(self.torch_state)))
        parts.append(bytes(self.torch_state))
        return b''.join(parts)

    @staticmethod
    def from_bytes(data):
        '''
        Parse the binary form.  Raises CorruptFileException on any malformation.
        '''
        try:
            if data[:len(_RNG_MAGIC)] != _RNG_MAGIC:
                raise CorruptFileException('RNG snapshot has a bad magic number')
            offset = len(_RNG_MAGIC)
            (count,) = struct.unpack_from('<I', data, offset)
            offset += 4
            states = {}
            for _ in range(count):
                (length,) = struct.unpack_from('<H', data, offset)
                offset += 2
                name = data[offset:offset + length].decode('utf-8')
                offset += length
                (s_lo, s_hi, i_lo, i_hi, has_uint32, uinteger) = struct.unpack_from('<QQQQBI', data, offset)
                offset += struct.calcsize('<QQQQBI')
                states[name] = {
                    'bit_generator': 'PCG64',
                    'state': {'state': s_lo | (s_hi << 64), 'inc': i_lo | (i_hi << 64)},
                    'has_uint32': has_uint32,
                    'uinteger': uinteger
                }
            (length,) = struct.unpack_from('<I', data, offset)
            offset += 4
            torch_state = data[offset:offset + length]
            if len(torch_state) != length or offset + length != len(data):
                raise CorruptFileException('RNG snapshot is truncated or has trailing bytes')
            return RngSnapshot(states, bytes(torch_state))
        except (struct.error, UnicodeDecodeError) as error:
            raise CorruptFileException(f'RNG snapshot is malformed: {error}')

    def __eq__(self, other):
        return isinstance(other, RngSnapshot) and self.to_bytes() == other.to_bytes()


class ReproContext:
    '''
    The master seed of a run and its named substreams.  Each substream has a
    single consumer; code that needs randomness per task uses spawn, never a
    shared stream.
    Arguments:
        master_seed: nonnegative int
        names: the substream names (default: PCBR_SUBSTREAMS)
    '''

    def __init__(self, master_seed, names=None):
        if isinstance(master_seed, bool) or not isinstance(master_seed, int) or master_seed < 0:
            raise PCBRException(f'master seed must be a nonnegative int, not {master_seed!r}')
        self.master_seed = master_seed
        self.names = list(PCBR_SUBSTREAMS if names is None else names)
        self.substreams = {name: _generator(hash64(master_seed, name)) for name in self.names}
        self.batch_sizes = {}

    def stream(self, name):
        '''
        The named substream.  Raises SchemaMismatchException for an unknown name
        '''
        try:
            return self.substreams[name]
        except KeyError:
            raise SchemaMismatchException(f'Unknown RNG substream {name}.  Known: {self.names}')

    def spawn(self, name, index):
        '''
        A fresh child generator for task index of substream name.  Independent of
        how many draws the parent has consumed.
        '''
        if name not in self.substreams:
            raise SchemaMismatchException(f'Unknown RNG substream {name}.  Known: {self.names}')
        return _generator(hash64(self.master_seed, f'{name}/{index}'))

    def seed_torch(self):
        '''
        Seed torch's global generator from the master seed and request deterministic kernels
        '''
        torch.manual_seed(hash64(self.master_seed, 'torch') & ((1 << 63) - 1))
        torch.use_deterministic_algorithms(True, warn_only=True)

    def record_batch_sizes(self, batch_size, eval_batch_size):
        self.batch_sizes = {'batch_size': batch_size, 'eval_batch_size': eval_batch_size}

    @property
    def env_record(self):
        return {
            'platform': platform.platform(),
            'machine': platform.machine(),
            'processor': platform.processor(),
            'python': sys.version.split()[0],
            'versions': {'numpy': np.__version__, 'pandas': pd.__version__, 'torch': torch.__version__},
            'torch_threads': torch.get_num_threads(),
            'batch_sizes': dict(self.batch_sizes)
        }

    def write_seed(self, out_dir):
        '''
        Write seed.txt (the decimal master seed and a newline) and env.json into out_dir
        '''
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, 'seed.txt'), 'w') as file:
            file.write(f'{self.master_seed}\n')
        with open(os.path.join(out_dir, 'env.json'), 'w') as file:
            json.dump(self.env_record, file, indent=2, sort_keys=True)


def init_repro(master_seed):
    '''
    Create the ReproContext of a run and seed torch's global generator from it.
    Arguments:
        master_seed: nonnegative int
    Returns:
        The ReproContext
    '''
    ctx = ReproContext(master_seed)
    ctx.seed_torch()
    logging.info(f'Reproducibility context initialized with master seed {master_seed}')
    return ctx


def read_seed(directory):
    '''
    The master seed stored in directory/seed.txt
    '''
    with open(os.path.join(directory, 'seed.txt'), 'r') as file:
        text = file.read().strip()
    try:
        return int(text)
    except ValueError:
        raise CorruptFileException(f'{directory}/seed.txt does not hold an integer seed')


def capture(ctx):
    '''
    Snapshot every substream of ctx and torch's global RNG
    '''
    states = {name: ctx.substreams[name].bit_generator.state for name in ctx.names}
    return RngSnapshot(states, torch.get_rng_state().numpy().tobytes())


def restore(ctx, snapshot):
    '''
    Put ctx (and torch's global RNG) back into the captured state, in place,
    so generators already handed out follow the restore too.  Every
    substream then continues bit-identically to the captured run.
    Raises:
        SchemaMismatchException if the snapshot's substream names differ from ctx's
    '''
    if sorted(snapshot.states.keys()) != sorted(ctx.names):
        missing = sorted(set(ctx.names) - set(snapshot.states.keys()))
        extra = sorted(set(snapshot.states.keys()) - set(ctx.names))
        raise SchemaMismatchException(f'RNG snapshot substreams differ: missing {missing}, unexpected {extra}')
    for name in ctx.names:
        ctx.substreams[name].bit_generator.state = snapshot.states[name]
    torch.set_rng_state(torch.frombuffer(bytearray(snapshot.torch_state), dtype=torch.uint8).clone())
