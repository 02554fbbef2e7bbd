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

import filecmp
import json
import os
import tempfile
import unittest

from os import path

from qvid.core_types import OutOfRange, QARecord, SourceKind, VideoRef
from qvid.datasets import (VARIABLE, Split, ValidationError, find_sentinel, load_normalized, record_from_json,
                           record_to_json, sentinel_for, synthesize_fixture, write_normalized)
from qvid.frame_sampler import list_frame_files


def line(**overrides):
    obj = {
        'record_id': 'r1',
        'dataset': 'unit',
        'video_id': 'v1',
        'video': {'kind': 'frame_dir', 'path': 'media/v1', 'start_s': None, 'end_s': None},
        'question': 'What is the boy holding?',
        'options': ['a ball', 'a kite', 'a cup'],
        'gold_index': 1,
        'question_type': 'Descriptive'
    }
    obj.update(overrides)
    return json.dumps(obj)


class TestLoadNormalized(unittest.TestCase):

    def setUp(self):
        self._tmp = tempfile.TemporaryDirectory()
        self.tmp = self._tmp.name
        os.makedirs(path.join(self.tmp, 'media', 'v1'))
        self.file_path = path.join(self.tmp, 'dataset.jsonl')

    def tearDown(self):
        self._tmp.cleanup()

    def write(self, *lines):
        with open(self.file_path, 'w', encoding='utf-8') as f:
            f.write('\n'.join(lines) + '\n')

    def test_loads_and_resolves_paths(self):
        self.write(line(), '', line(record_id='r2', options=['x', 'y'], gold_index=None, question_type=None))
        dataset = load_normalized(self.file_path)
        self.assertEqual(len(dataset), 2)
        self.assertEqual(dataset.dataset_name, 'unit')
        self.assertEqual(dataset.split, Split.VAL)
        self.assertEqual(dataset.option_count_mode, VARIABLE)
        self.assertEqual(dataset.question_types, ['Descriptive'])
        self.assertEqual(dataset.records[0].video.path, path.join(self.tmp, 'media/v1'))
        self.assertIsNone(dataset.by_id()['r2'].gold_index)

    def test_collects_every_problem(self):
        self.write(line(gold_index=3),
                   line(record_id='r2', options=['only one']),
                   'not json',
                   line(record_id='r3', video={'kind': 'frame_dir', 'path': 'media/missing'}),
                   line(record_id='r4'),
                   line(record_id='r4'),
                   json.dumps({'record_id': 'r5'}))
        with self.assertRaises(ValidationError) as ctx:
            load_normalized(self.file_path)
        problems = ctx.exception.problems
        self.assertEqual(len(problems), 6)
        self.assertTrue(problems[0].startswith('line 1:'))
        self.assertIn('duplicate record #r4', problems[4])
        self.assertIn('missing field', problems[5])

    def test_media_check_can_be_skipped(self):
        self.write(line(video={'kind': 'video_file', 'path': 'clip.mp4'}))
        with self.assertRaises(ValidationError):
            load_normalized(self.file_path)
        self.assertEqual(len(load_normalized(self.file_path, check_media=False)), 1)

    def test_empty_file(self):
        self.write('')
        with self.assertRaises(ValidationError):
            load_normalized(self.file_path)

    def test_json_round_trip(self):
        record = QARecord('r9', VideoRef('v9', SourceKind.VIDEO_FILE, '/media/v9.mp4', start_s=1.5, end_s=4.0,
                                         fps=29.97), 'Why?', ('a', 'b'), 0, 'Causal', 'unit')
        obj = record_to_json(record, '/media')
        self.assertEqual(obj['video']['path'], 'v9.mp4')
        self.assertEqual(record_from_json(obj, '/media'), record)

    def test_write_normalized(self):
        self.write(line())
        dataset = load_normalized(self.file_path)
        out_path = path.join(self.tmp, 'copy.jsonl')
        self.assertEqual(write_normalized(dataset.records, out_path, self.tmp), 1)
        self.assertEqual(load_normalized(out_path).records, dataset.records)


class TestSynthesize(unittest.TestCase):

    def setUp(self):
        self._tmp = tempfile.TemporaryDirectory()
        self.tmp = self._tmp.name

    def tearDown(self):
        self._tmp.cleanup()

    def test_is_deterministic(self):
        first = synthesize_fixture(path.join(self.tmp, 'a'), 10, 4, seed=7)
        second = synthesize_fixture(path.join(self.tmp, 'b'), 10, 4, seed=7)
        self.assertTrue(filecmp.cmp(first.source_path, second.source_path, shallow=False))
        for a, b in zip(first.records, second.records):
            files_a, files_b = list_frame_files(a.video.path), list_frame_files(b.video.path)
            self.assertEqual([path.basename(f) for f in files_a], [path.basename(f) for f in files_b])
            for fa, fb in zip(files_a, files_b):
                self.assertTrue(filecmp.cmp(fa, fb, shallow=False))

    def test_other_seed_differs(self):
        first = synthesize_fixture(path.join(self.tmp, 'a'), 10, 4, seed=7)
        second = synthesize_fixture(path.join(self.tmp, 'b'), 10, 4, seed=8)
        self.assertFalse(filecmp.cmp(first.source_path, second.source_path, shallow=False))

    def test_records(self):
        dataset = synthesize_fixture(self.tmp, 9, [3, 4, 5], seed=7)
        self.assertEqual([r.m for r in dataset.records], [3, 4, 5] * 3)
        self.assertEqual(dataset.question_types, ['Temporal', 'Causal', 'Descriptive'])
        for i, record in enumerate(dataset.records):
            self.assertEqual(record.record_id, f'syn7-{i:05d}')
            self.assertEqual(find_sentinel(record), sentinel_for(7, i))
            self.assertIn(sentinel_for(7, i), record.options[0])
            self.assertTrue(3 <= len(list_frame_files(record.video.path)) <= 10)
            self.assertTrue(0 <= record.gold_index < record.m)

        loaded = load_normalized(dataset.source_path)
        self.assertEqual(loaded.records, dataset.records)

    def test_option_count_limits(self):
        self.assertEqual(synthesize_fixture(self.tmp, 2, 2).option_count_mode, 2)
        with self.assertRaises(OutOfRange):
            synthesize_fixture(self.tmp, 2, 27)
        with self.assertRaises(OutOfRange):
            synthesize_fixture(self.tmp, 2, [4, 1])


if __name__ == '__main__':
    unittest.main()
