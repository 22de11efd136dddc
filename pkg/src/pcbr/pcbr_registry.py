'''
Registries mapping names from the configuration documents to the code that
implements them: backbones, datasets, and the relevance rules used by PRP.
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

from pcbr.pcbr_utils import PCBRException


def _check_name(name):
    assert isinstance(name, str), f'Registry names must be strings, not {type(name)}'
    assert len(name) > 0, 'Registry names must be nonempty'


class Registry:
    '''
    A registry of named entries.  Its task is to maintain a correspondence between
    the identifiers used in configuration documents and the factories that build
    the corresponding objects.  A lookup of an unregistered name raises the
    registry's not_found exception class, with the list of known names in the message.
    Arguments:
        kind: what is registered, for error messages (e.g. 'backbone')
        not_found: the exception class raised for unknown names
    '''

    def __init__(self, kind, not_found=PCBRException):
        self.kind = kind
        self.not_found = not_found
        self.entries = {}

    def register(self, name, entry, replace=False):
        '''
        Register entry under name.  Refuses to silently shadow an existing entry
        unless replace is True.
        Arguments:
            name: the identifier used in configuration documents
            entry: the object to register
            replace: if True, an existing entry of the same name is overwritten
        '''
        try:
            _check_name(name)
        except AssertionError as err:
            raise PCBRException(str(err))
        if name in self.entries and not replace:
            raise PCBRException(f'{self.kind} {name} is already registered')
        self.entries[name] = entry

    def unregister(self, name):
        '''
        Remove name from the registry, if present
        '''
        self.entries.pop(name, None)

    def get(self, name):
        '''
        Get the entry registered under name.
        Raises:
            self.not_found if there is no such entry
        '''
        try:
            return self.entries[name]
        except (KeyError, TypeError):
            raise self.not_found(f'Unknown {self.kind} {name}.  Known: {self.names()}')

    def names(self):
        '''
        The sorted list of registered names
        '''
        return sorted(self.entries.keys())

    def __contains__(self, name):
        return name in self.entries
