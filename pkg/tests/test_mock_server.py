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

import base64
import json
import tempfile
import unittest

from os import path

import requests

from qvid.core_types import Conflict
from qvid.mock_server import (CAPTION_ROUTE, CHAT_ROUTE, GENERATE_ROUTE, LOG_ROUTE, STATS_ROUTE, MockServer,
                              RigFileError, RigRule, caption_text, dump_rig, generate_text, h8, load_rig_file,
                              replay_log, respond, rig_answers)
from tests.helpers import png_bytes


FAKE_IMAGE = b'\x89PNG fake'


def caption_body(image=FAKE_IMAGE, instruction='Describe: Why?', **extra):
    body = {'model': 'cap', 'image_b64': base64.b64encode(image).decode('ascii'), 'instruction': instruction}
    body.update(extra)
    return body


def generate_body(prompt, **extra):
    body = {'model': 'reasoner', 'prompt': prompt}
    body.update(extra)
    return body


class TestRespond(unittest.TestCase):

    def test_caption_is_a_function_of_image_and_instruction(self):
        status, obj = respond(CAPTION_ROUTE, caption_body())
        self.assertEqual(status, 200)
        self.assertEqual(obj['text'], f'mock caption {h8(FAKE_IMAGE)} for instruction '
                                      f'{h8(b"Describe: Why?")}')
        self.assertEqual(respond(CAPTION_ROUTE, caption_body()), (status, obj))
        self.assertNotEqual(respond(CAPTION_ROUTE, caption_body(instruction='other'))[1]['text'], obj['text'])

    def test_generate_picks_first_option_letter(self):
        status, obj = respond(GENERATE_ROUTE, generate_body('Q? Option C: x. Option D: y.'))
        self.assertEqual((status, obj['text']), (200, 'C'))
        self.assertEqual(generate_text('no options'), 'No options given.')

    def test_generate_ignores_option_text_in_captions(self):
        prompt = ('Captions: a sign reads Option C: exit. Question: Where is the dog? '
                  'Option A: park. Option B: beach. Select from (A,B)')
        self.assertEqual(generate_text(prompt), 'A')
        self.assertEqual(generate_text('Captions: Option D: no question here'), 'D')

    def test_word_limit(self):
        status, obj = respond(CAPTION_ROUTE, caption_body(max_new_tokens=3))
        self.assertEqual(obj['text'], f'mock caption {h8(FAKE_IMAGE)}')
        self.assertTrue(obj['truncated'])

    def test_malformed_bodies(self):
        self.assertEqual(respond(CAPTION_ROUTE, {'instruction': 'x'})[0], 400)
        self.assertEqual(respond(CAPTION_ROUTE, caption_body(image_b64='%%%'))[0], 400)
        self.assertEqual(respond(GENERATE_ROUTE, generate_body('x', max_new_tokens=0))[0], 400)
        self.assertEqual(respond(GENERATE_ROUTE, ['prompt'])[0], 400)
        status, obj = respond(CHAT_ROUTE, {'messages': []})
        self.assertEqual(status, 400)
        self.assertEqual(obj['error']['code'], 'protocol_error')
        self.assertNotIn('type', obj['error'])
        self.assertEqual(respond('/v1/unknown', {})[0], 404)

    def test_native_routes_require_model(self):
        for route, body in ((CAPTION_ROUTE, caption_body()), (GENERATE_ROUTE, generate_body('Option A: x.'))):
            del body['model']
            status, obj = respond(route, body)
            self.assertEqual(status, 400)
            self.assertEqual(obj['error']['code'], 'protocol_error')
            self.assertIn('"model"', obj['error']['message'])

            body['model_id'] = 'cap'
            self.assertEqual(respond(route, body)[0], 400)

    def test_chat_route(self):
        image = png_bytes()
        url = 'data:image/jpeg;base64,' + base64.b64encode(image).decode('ascii')
        body = {'model': 'cap', 'max_tokens': 30, 'messages': [{'role': 'user', 'content': [
            {'type': 'image_url', 'image_url': {'url': url}}, {'type': 'text', 'text': 'Describe'}]}]}
        status, obj = respond(CHAT_ROUTE, body)
        self.assertEqual(status, 200)
        self.assertEqual(obj['choices'][0]['message']['content'], caption_text(image, 'Describe'))
        self.assertEqual(obj['choices'][0]['finish_reason'], 'stop')

    def test_rules(self):
        rules = [RigRule('#q7-00001#', 'B'), RigRule(r'kitchen|garage', 'a room', 'caption', is_regex=True)]
        self.assertEqual(generate_text('Option A: x #q7-00001#.', rules), 'B')
        self.assertEqual(caption_text(b'img', 'Is it a kitchen?', rules), 'a room')
        self.assertEqual(caption_text(b'img', 'Is it a park?', rules), caption_text(b'img', 'Is it a park?'))
        with self.assertRaises(RigFileError):
            RigRule('x', 'y', 'embed')
        with self.assertRaises(RigFileError):
            RigRule('(', 'y', is_regex=True)


class TestRigFiles(unittest.TestCase):

    def setUp(self):
        self._tmp = tempfile.TemporaryDirectory()
        self.tmp = self._tmp.name

    def tearDown(self):
        self._tmp.cleanup()

    def test_dump_and_load(self):
        rules = [RigRule('#q7-00000#', 'A'), RigRule('^Describe', 'a dog', 'caption', is_regex=True)]
        file_path = path.join(self.tmp, 'rig.tsv')
        dump_rig(rules, file_path)
        self.assertEqual(load_rig_file(file_path), rules)

    def test_rig_answers(self):
        file_path = path.join(self.tmp, 'rig.tsv')
        rules = rig_answers([('#q7-00000#', 'A'), ('#q7-00001#', 'I have no idea')], file_path)
        self.assertEqual(load_rig_file(file_path), rules)
        with self.assertRaises(Conflict):
            rig_answers([('#q7-00000#', 'A'), ('#q7-00000#', 'B')])

    def test_bad_rig_file(self):
        file_path = path.join(self.tmp, 'rig.tsv')
        with open(file_path, 'w') as f:
            f.write('# comment\n\ngenerate\tonly two fields\n')
        with self.assertRaises(RigFileError):
            load_rig_file(file_path)


class TestMockServer(unittest.TestCase):

    def setUp(self):
        self._tmp = tempfile.TemporaryDirectory()
        self.log_path = path.join(self._tmp.name, 'requests.jsonl')

    def tearDown(self):
        self._tmp.cleanup()

    def test_http_surface_and_request_log(self):
        with MockServer(log_path=self.log_path) as mock:
            resp = requests.post(mock.url + GENERATE_ROUTE, json=generate_body('Option B: x.'))
            self.assertEqual(resp.json()['text'], 'B')
            resp = requests.post(mock.url + CAPTION_ROUTE, json=caption_body())
            self.assertEqual(resp.status_code, 200)
            resp = requests.post(mock.url + GENERATE_ROUTE, data=b'not json',
                                 headers={'Content-Type': 'application/json'})
            self.assertEqual(resp.status_code, 400)

            stats = requests.get(mock.url + STATS_ROUTE).json()
            self.assertEqual(stats['requests'], 3)
            self.assertEqual(stats['routes'][GENERATE_ROUTE], 2)
            self.assertEqual(len(requests.get(mock.url + LOG_ROUTE).json()['log']), 2)
            resp = requests.get(mock.url + '/nope')
            self.assertEqual(resp.status_code, 404)
            self.assertEqual(resp.json()['error']['code'], 'not_found')

        with open(self.log_path, 'r', encoding='utf-8') as f:
            logged = [json.loads(line) for line in f]
        self.assertEqual([entry['route'] for entry in logged], [GENERATE_ROUTE, CAPTION_ROUTE])

        replayed = replay_log(self.log_path)
        self.assertEqual(replayed[0], (200, {'text': 'B', 'truncated': False}))
        self.assertEqual(replayed[1], respond(CAPTION_ROUTE, caption_body()))

    def test_failure_injection_and_reset(self):
        with MockServer() as mock:
            mock.fail_next(CAPTION_ROUTE, [503])
            resp = requests.post(mock.url + CAPTION_ROUTE, json=caption_body())
            self.assertEqual(resp.status_code, 503)
            self.assertEqual(resp.json()['error']['code'], 'injected')
            self.assertEqual(requests.post(mock.url + CAPTION_ROUTE, json=caption_body()).status_code, 200)
            self.assertEqual(mock.route_count(CAPTION_ROUTE), 2)
            mock.reset()
            self.assertEqual(mock.stats()['requests'], 0)
            self.assertEqual(mock.stats()['high_water'], 0)

    def test_rules_can_be_swapped(self):
        with MockServer(rules=[RigRule('sentinel', 'D')]) as mock:
            url = mock.url + GENERATE_ROUTE
            self.assertEqual(requests.post(url, json=generate_body('sentinel')).json()['text'], 'D')
            mock.set_rules([])
            self.assertEqual(requests.post(url, json=generate_body('sentinel')).json()['text'], 'No options given.')


if __name__ == '__main__':
    unittest.main()
