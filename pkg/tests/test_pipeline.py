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

import json
import os
import shutil
import unittest

from concurrent.futures import as_completed
from os import path
from unittest import mock

from qvid.core_types import Conflict, InvalidRecord, text_digest
from qvid.datasets import find_sentinel, synthesize_fixture
from qvid.frame_sampler import SamplerConfig, SourceError, extract, plan_indices
from qvid.mock_server import CAPTION_ROUTE, GENERATE_ROUTE, RigRule, caption_text, rig_answers
from qvid.model_client import BadRequest, EndpointConfig, InvalidRequest
from qvid.pipeline import EmptyInput, FailPolicy, Pipeline
from qvid.prompt_templates import TemplateRegistry
from qvid.run_store import COMPLETED_FILE, PREDICTIONS_FILE, prediction_line
from qvid.utils.errorm import ErrorManager
from tests.helpers import MockServerTestCase, make_record, write_frame_dir


class TestDescribeVideo(MockServerTestCase):

    def setUp(self):
        super().setUp()
        self.frame_dir = path.join(self.tmp, 'frames', 'v64')
        write_frame_dir(self.frame_dir, 64)
        self.record = make_record('r64', self.frame_dir, question='What does the boy do after he falls?')

    def pipeline(self, **kwargs):
        return Pipeline(self.pipeline_config(**kwargs), TemplateRegistry())

    def test_captions_every_planned_frame_in_order(self):
        pipeline = self.pipeline()
        captions = pipeline.describe_video(self.record)

        instruction = ('Provide a detailed description of the image related to the question: '
                       'What does the boy do after he falls?')
        frames = extract(self.record.video, plan_indices(64, 64), SamplerConfig())
        self.assertEqual(len(captions), 64)
        self.assertEqual(captions.texts, tuple(caption_text(f.image_bytes, instruction) for f in frames))
        self.assertEqual([c.frame_index for c in captions.captions], list(range(64)))
        self.assertEqual(captions.question_hash, text_digest(self.record.question))
        self.assertEqual(self.mock.route_count(CAPTION_ROUTE), 64)
        self.assertLessEqual(self.mock.stats()['high_water'], 8)

    def test_second_call_is_served_from_cache(self):
        first = self.pipeline().describe_video(self.record)
        self.mock.reset()
        second = self.pipeline().describe_video(self.record)
        self.assertEqual(first, second)
        self.assertEqual(self.mock.route_count(CAPTION_ROUTE), 0)

    def test_without_cache_every_call_hits_captioner(self):
        pipeline = self.pipeline(cache_enabled=False)
        pipeline.describe_video(self.record)
        pipeline.describe_video(self.record)
        self.assertEqual(self.mock.route_count(CAPTION_ROUTE), 128)
        self.assertFalse(path.exists(path.join(self.tmp, 'cache')))

    def test_short_video_gives_every_frame(self):
        short_dir = path.join(self.tmp, 'frames', 'v3')
        write_frame_dir(short_dir, 3)
        captions = self.pipeline().describe_video(make_record('r3', short_dir))
        self.assertEqual(len(captions), 3)

    def test_fewer_frames_when_configured(self):
        pipeline = self.pipeline(sampler=SamplerConfig(n_frames=4))
        self.assertEqual(len(pipeline.describe_video(self.record)), 4)

    def test_general_template_leaves_question_out(self):
        pipeline = self.pipeline(caption_template_id='general_v2')
        captions = pipeline.describe_video(self.record)
        self.assertEqual(captions.question_hash, text_digest(''))
        instructions = {entry['body']['instruction'] for entry in self.mock.state.log}
        self.assertEqual(instructions, {'Write a detailed description for the image.'})

    def test_captioner_error_propagates(self):
        self.mock.fail_next(CAPTION_ROUTE, [400])
        with self.assertRaises(BadRequest):
            self.pipeline(sampler=SamplerConfig(n_frames=4)).describe_video(self.record)


class TestAnswer(MockServerTestCase):

    def setUp(self):
        super().setUp()
        self.frame_dir = path.join(self.tmp, 'frames', 'v8')
        write_frame_dir(self.frame_dir, 8)
        self.pipeline = Pipeline(self.pipeline_config(sampler=SamplerConfig(n_frames=4)), TemplateRegistry())

    def generate_prompts(self):
        return [entry['body']['prompt'] for entry in self.mock.state.log if entry['route'] == GENERATE_ROUTE]

    def test_rigged_letter(self):
        record = make_record('r1', self.frame_dir, question='Where is the boy sitting?')
        self.mock.set_rules([RigRule('Where is the boy sitting?', 'B')])
        prediction = self.pipeline.process(record)
        self.assertEqual(prediction.answer_index, 1)
        self.assertEqual(prediction.raw_text, 'B')
        self.assertEqual(prediction.n_frames, 4)
        self.assertEqual((prediction.caption_template_id, prediction.qa_template_id),
                         ('dependent_base', 'qa_base'))
        self.assertEqual((prediction.captioner_model_id, prediction.reasoner_model_id),
                         ('mock-captioner', 'mock-reasoner'))

    def test_free_text_is_unparsed(self):
        record = make_record('r1', self.frame_dir)
        self.mock.set_rules([RigRule('Where is the boy?', 'I am not sure')])
        prediction = self.pipeline.process(record)
        self.assertIsNone(prediction.answer_index)
        self.assertEqual(prediction.raw_text, 'I am not sure')
        self.assertFalse(prediction.failed)

    def test_prompt_lists_five_letters_and_captions_in_frame_order(self):
        record = make_record('r5', self.frame_dir, options=['a', 'b', 'c', 'd', 'e'])
        captions = self.pipeline.describe_video(record)
        self.pipeline.answer(record, captions)

        prompt = self.generate_prompts()[-1]
        self.assertTrue(prompt.endswith('from the options (A,B,C,D,E)'))
        positions = [prompt.index(text) for text in captions.texts]
        self.assertEqual(positions, sorted(positions))

    def test_skip_record_policy(self):
        pipeline = Pipeline(self.pipeline_config(fail_policy=FailPolicy.SKIP_RECORD), TemplateRegistry())
        record = make_record('gone', path.join(self.tmp, 'no-such-dir'))
        prediction = pipeline.process(record)
        self.assertTrue(prediction.failed)
        self.assertIsNone(prediction.answer_index)
        self.assertEqual(ErrorManager().get_all_errors()[-1]['record_id'], 'gone')

    def test_unusable_endpoint_follows_skip_policy(self):
        cfg = self.pipeline_config(fail_policy=FailPolicy.SKIP_RECORD).replace(
            captioner=EndpointConfig('mock://nowhere', 'mock-captioner'))
        prediction = Pipeline(cfg, TemplateRegistry()).process(make_record('r1', self.frame_dir))
        self.assertTrue(prediction.failed)
        self.assertEqual(ErrorManager().get_all_errors()[-1]['record_id'], 'r1')

        with self.assertRaises(InvalidRequest):
            pipeline = Pipeline(cfg.replace(fail_policy=FailPolicy.ABORT), TemplateRegistry())
            pipeline.process(make_record('r1', self.frame_dir))

    def test_abort_policy(self):
        record = make_record('gone', path.join(self.tmp, 'no-such-dir'))
        with self.assertRaises(SourceError):
            self.pipeline.process(record)


class TestRunDataset(MockServerTestCase):

    def setUp(self):
        super().setUp()
        self.dataset = synthesize_fixture(path.join(self.tmp, 'fixture'), 10, [3, 4, 5], seed=7)
        self.out = path.join(self.tmp, 'run')

    def pipeline(self, **kwargs):
        return Pipeline(self.pipeline_config(**kwargs), TemplateRegistry())

    def read(self, out_dir, name):
        with open(path.join(out_dir, name), 'r', encoding='utf-8') as f:
            return f.read()

    def test_predictions_follow_rigging(self):
        answers = {find_sentinel(r): 'ABCDE'[r.gold_index] for r in self.dataset.records}
        self.mock.set_rules(rig_answers(answers.items()))

        result = self.pipeline().run_dataset(self.dataset.records, self.out)
        self.assertEqual([p.record_id for p in result.predictions], [r.record_id for r in self.dataset.records])
        self.assertEqual([p.answer_index for p in result.predictions], [r.gold_index for r in self.dataset.records])

        manifest = json.loads(self.read(self.out, 'manifest.json'))
        self.assertEqual(manifest['status'], 'completed')
        self.assertEqual(manifest['counts']['predictions'], 10)
        self.assertEqual(manifest['counts']['parsed'], 10)
        self.assertEqual(manifest['templates']['captioning']['body'],
                         'Provide a detailed description of the image related to the question: {Q}')
        self.assertEqual(manifest['models'], {'captioner': 'mock-captioner', 'reasoner': 'mock-reasoner'})
        self.assertNotIn('auth_token', json.dumps(manifest['config']))
        self.assertEqual(self.read(self.out, PREDICTIONS_FILE).count('\n'), 10)

    def test_workers_do_not_change_output(self):
        self.pipeline().run_dataset(self.dataset.records, self.out)
        other = path.join(self.tmp, 'run4')
        self.pipeline(workers=4).run_dataset(self.dataset.records, other)
        self.assertEqual(self.read(self.out, PREDICTIONS_FILE), self.read(other, PREDICTIONS_FILE))

    def test_empty_and_duplicate_input(self):
        with self.assertRaises(EmptyInput):
            self.pipeline().run_dataset([], self.out)
        with self.assertRaises(InvalidRecord):
            self.pipeline().run_dataset(self.dataset.records + self.dataset.records[:1], self.out)

    def test_resume_after_interruption(self):
        full = self.pipeline().run_dataset(self.dataset.records, self.out)
        expected = self.read(self.out, PREDICTIONS_FILE)

        resumed_dir = path.join(self.tmp, 'resumed')
        os.makedirs(resumed_dir)
        with open(path.join(resumed_dir, COMPLETED_FILE), 'w', encoding='utf-8') as f:
            for prediction in full.predictions[:5]:
                f.write(prediction_line(prediction))
            f.write(prediction_line(full.predictions[5])[:30])

        self.mock.reset()
        result = self.pipeline().run_dataset(self.dataset.records, resumed_dir, resume=True)
        self.assertEqual(self.read(resumed_dir, PREDICTIONS_FILE), expected)
        self.assertEqual(result.manifest['counts']['resumed'], 5)
        self.assertEqual(self.mock.route_count(GENERATE_ROUTE), 5)

    def test_ctrl_c_drains_and_resume_completes(self):
        self.pipeline().run_dataset(self.dataset.records, self.out)
        expected = self.read(self.out, PREDICTIONS_FILE)

        def interrupt_after_three(futures):
            for position, future in enumerate(as_completed(futures)):
                if position == 3:
                    raise KeyboardInterrupt
                yield future

        interrupted_dir = path.join(self.tmp, 'interrupted')
        with mock.patch('qvid.pipeline.as_completed', interrupt_after_three):
            with self.assertRaises(KeyboardInterrupt):
                self.pipeline(workers=2).run_dataset(self.dataset.records, interrupted_dir)

        manifest = json.loads(self.read(interrupted_dir, 'manifest.json'))
        self.assertEqual(manifest['status'], 'interrupted')
        self.assertTrue(manifest['interrupted'])
        drained = manifest['counts']['predictions']
        self.assertGreaterEqual(drained, 3)
        self.assertEqual(self.read(interrupted_dir, COMPLETED_FILE).count('\n'), drained)
        self.assertFalse(path.exists(path.join(interrupted_dir, PREDICTIONS_FILE)))

        self.mock.reset()
        result = self.pipeline(workers=2).run_dataset(self.dataset.records, interrupted_dir, resume=True)
        self.assertEqual(self.read(interrupted_dir, PREDICTIONS_FILE), expected)
        self.assertEqual(result.manifest['status'], 'completed')
        self.assertFalse(result.manifest['interrupted'])
        self.assertEqual(result.manifest['counts']['resumed'], drained)
        self.assertEqual(self.mock.route_count(GENERATE_ROUTE), 10 - drained)

    def test_resume_refuses_other_templates(self):
        self.pipeline().run_dataset(self.dataset.records[:3], self.out)
        with self.assertRaises(Conflict):
            self.pipeline(qa_template_id='qa_v1').run_dataset(self.dataset.records, self.out, resume=True)

    def test_skipped_records_are_logged(self):
        shutil.rmtree(self.dataset.records[2].video.path)
        result = self.pipeline(fail_policy=FailPolicy.SKIP_RECORD).run_dataset(self.dataset.records, self.out)
        self.assertTrue(result.predictions[2].failed)
        self.assertEqual(result.manifest['counts']['failed'], 1)
        errors = [json.loads(line) for line in self.read(self.out, 'errors.jsonl').splitlines()]
        self.assertEqual([e['record_id'] for e in errors], [self.dataset.records[2].record_id])

    def test_abort_writes_manifest_but_no_predictions(self):
        shutil.rmtree(self.dataset.records[0].video.path)
        with self.assertRaises(SourceError):
            self.pipeline().run_dataset(self.dataset.records, self.out)
        self.assertEqual(json.loads(self.read(self.out, 'manifest.json'))['status'], 'aborted')
        self.assertFalse(path.exists(path.join(self.out, PREDICTIONS_FILE)))


if __name__ == '__main__':
    unittest.main()
