#    ___   __     ___ ____
#   / _ \  \ \   / (_)  _ \
#  | | | |  \ \ / /| | | | |
#  | |_| |   \ V / | | |_| |
#   \__\_\   \_/  |_|____/
#
# Zero-shot video question answering from question-guided frame captions
# Copyright (C) 2024 QViD harness developers. All rights reserved
#
# QViD harness is free software: you can redistribute it and/or modify
# it under the terms of the GNU Affero General Public License as published by
# the Free Software Foundation, either version 3 of the License.
#
# QViD harness is distributed in the hope that it will be useful,
# but WITHOUT ANY WARRANTY; without even the implied warranty of
# MERCHANTABILITY or FITNESS FOR A PARTICULAR PURPOSE.  See the
# GNU Affero General Public License for more details.
#
# You should have received a copy of the GNU Affero General Public License
# along with QViD harness. If not, see <https://www.gnu.org/licenses/>.

import io
import logging
import os
import tempfile
import unittest

from os import path
from typing import List

from PIL import Image

from qvid.core_types import QARecord, SourceKind, VideoRef
from qvid.mock_server import MockServer
from qvid.model_client import EndpointConfig
from qvid.pipeline import PipelineConfig
from qvid.prompt_templates import DefaultTemplates
from qvid.utils.errorm import ErrorManager

FIXTURES_DIR = path.join(path.dirname(path.abspath(__file__)), 'fixtures')

logging.getLogger('qvidlog').addHandler(logging.NullHandler())
logging.getLogger('qvidlog').propagate = False


def write_frame_dir(frame_dir: str, n_frames: int, size=(16, 12)) -> List[str]:
    """n_frames distinct solid-colour JPEGs named 00000.jpg, 00001.jpg, ..."""
    os.makedirs(frame_dir, exist_ok=True)
    files = []
    for i in range(n_frames):
        file_path = path.join(frame_dir, f'{i:05d}.jpg')
        color = ((i * 37) % 256, (i * 91 + 40) % 256, (i * 13 + 80) % 256)
        Image.new('RGB', size, color).save(file_path, format='JPEG', quality=95)
        files.append(file_path)
    return files


def png_bytes(color=(10, 20, 30), size=(8, 8)) -> bytes:
    out = io.BytesIO()
    Image.new('RGB', size, color).save(out, format='PNG')
    return out.getvalue()


def make_record(record_id: str, frame_dir: str, options=('a garage', 'a kitchen', 'a park'),
                question: str = 'Where is the boy?', gold_index=1, question_type=None) -> QARecord:
    return QARecord(record_id, VideoRef('v-' + record_id, SourceKind.FRAME_DIR, frame_dir), question,
                    tuple(options), gold_index, question_type, 'unit')


class MockServerTestCase(unittest.TestCase):
    """Mock endpoints on an ephemeral port plus a scratch directory per test"""

    mock: MockServer

    @classmethod
    def setUpClass(cls) -> None:
        cls.mock = MockServer()
        cls.mock.start()

    @classmethod
    def tearDownClass(cls) -> None:
        cls.mock.stop()

    def setUp(self) -> None:
        self.mock.reset()
        self.mock.set_rules([])
        self.mock.state.delay = 0.0
        self._tmp = tempfile.TemporaryDirectory(prefix='qvid-test-')
        self.tmp = self._tmp.name
        ErrorManager().clear_all_errors()

    def tearDown(self) -> None:
        ErrorManager().bind(None)
        self._tmp.cleanup()

    def endpoint(self, model_id: str, **kwargs) -> EndpointConfig:
        kwargs.setdefault('backoff_base', 0.01)
        kwargs.setdefault('backoff_cap', 0.05)
        return EndpointConfig(self.mock.url, model_id, **kwargs)

    def pipeline_config(self, **kwargs) -> PipelineConfig:
        kwargs.setdefault('cache_dir', path.join(self.tmp, 'cache'))
        return PipelineConfig(captioner=self.endpoint('mock-captioner'),
                              reasoner=self.endpoint('mock-reasoner'), **kwargs)

    def run_flags(self, dataset: str, out: str, *extra: str) -> List[str]:
        return ['--log-dir', path.join(self.tmp, 'logs'), 'run', '--dataset', dataset, '--out', out,
                '--captioner-url', self.mock.url, '--reasoner-url', self.mock.url,
                '--cache-dir', path.join(self.tmp, 'cache'), '--quiet', *extra]


def registry():
    return DefaultTemplates()
