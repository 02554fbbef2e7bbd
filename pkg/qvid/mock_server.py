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
import binascii
import json
import logging
import re
import time

from collections import Counter, deque
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from threading import Lock, Thread
from typing import Any, Deque, Dict, Iterable, List, Optional, Sequence, Tuple

from qvid.core_types import Conflict, QvidError, sha256_hex


class RigFileError(QvidError):
    pass


class MalformedRequest(QvidError):
    pass


CAPTION = 'caption'
GENERATE = 'generate'

CAPTION_ROUTE = '/v1/caption'
GENERATE_ROUTE = '/v1/generate'
CHAT_ROUTE = '/v1/chat/completions'
STATS_ROUTE = '/v1/stats'
LOG_ROUTE = '/v1/log'

REGEX_PREFIX = 're:'

OPTION_LETTER_RE = re.compile(r'Option ([A-Z]):')
QUESTION_MARKER = 'Question:'


@dataclass(frozen=True)
class RigRule:
    """Response override: first rule (in file order) whose match occurs in the text wins"""

    match: str
    response_text: str
    applies_to: str = GENERATE
    is_regex: bool = False

    def __post_init__(self) -> None:
        if self.applies_to not in (CAPTION, GENERATE):
            raise RigFileError(f'Rule applies to unknown request kind "{self.applies_to}"')
        if self.is_regex:
            try:
                re.compile(self.match)
            except re.error as e:
                raise RigFileError(f'Bad rule pattern {self.match!r}: {e}')

    def matches(self, kind: str, text: str) -> bool:
        if kind != self.applies_to:
            return False
        if self.is_regex:
            return re.search(self.match, text) is not None
        return self.match in text


def load_rig_file(file_path: str) -> List[RigRule]:
    """
    Rig file: one rule per line, '<caption|generate>\\t<match>\\t<response>'.
    A match starting with 're:' is a regular expression, otherwise a substring.
    Blank lines and lines starting with '#' are skipped.
    """

    rules = []
    with open(file_path, 'r', encoding='utf-8') as f:
        for n, line in enumerate(f, start=1):
            line = line.rstrip('\n')
            if not line.strip() or line.startswith('#'):
                continue
            parts = line.split('\t')
            if len(parts) != 3:
                raise RigFileError(f'{file_path}:{n}: expected 3 tab-separated fields, got {len(parts)}')
            applies_to, match, response = parts
            is_regex = match.startswith(REGEX_PREFIX)
            if is_regex:
                match = match[len(REGEX_PREFIX):]
            rules.append(RigRule(match, response, applies_to, is_regex))
    return rules


def dump_rig(rules: Iterable[RigRule], file_path: str) -> None:
    with open(file_path, 'w', encoding='utf-8', newline='\n') as f:
        f.write('# applies_to\tmatch\tresponse\n')
        for rule in rules:
            for value in (rule.match, rule.response_text):
                if '\t' in value or '\n' in value:
                    raise RigFileError(f'Rule field {value!r} contains a tab or a newline')
            match = REGEX_PREFIX + rule.match if rule.is_regex else rule.match
            f.write(f'{rule.applies_to}\t{match}\t{rule.response_text}\n')


def rig_answers(answers: Iterable[Tuple[str, str]], file_path: Optional[str] = None) -> List[RigRule]:
    """
    Rules making every QA prompt that contains a sentinel elicit the mapped response
    (usually a letter). Written to file_path when given.
    """

    rules = []
    seen = set()
    for sentinel, response in answers:
        if not sentinel:
            raise RigFileError('Empty sentinel')
        if sentinel in seen:
            raise Conflict(f'Sentinel {sentinel} is rigged twice')
        seen.add(sentinel)
        rules.append(RigRule(sentinel, response, GENERATE))

    if file_path is not None:
        dump_rig(rules, file_path)
    return rules


def h8(data: bytes) -> str:
    return sha256_hex(data)[:8]


def _limit_words(text: str, max_new_tokens: Optional[int]) -> Tuple[str, bool]:
    words = text.split()
    if max_new_tokens is not None and len(words) > max_new_tokens:
        return ' '.join(words[:max_new_tokens]), True
    return text, False


def _rigged(rules: Sequence[RigRule], kind: str, text: str) -> Optional[str]:
    for rule in rules:
        if rule.matches(kind, text):
            return rule.response_text
    return None


def caption_text(image: bytes, instruction: str, rules: Sequence[RigRule] = ()) -> str:
    rigged = _rigged(rules, CAPTION, instruction)
    if rigged is not None:
        return rigged
    return f'mock caption {h8(image)} for instruction {h8(instruction.encode("utf-8"))}'


def generate_text(prompt: str, rules: Sequence[RigRule] = ()) -> str:
    rigged = _rigged(rules, GENERATE, prompt)
    if rigged is not None:
        return rigged
    # options follow the last question marker; captions come before it
    match = OPTION_LETTER_RE.search(prompt, max(prompt.rfind(QUESTION_MARKER), 0))
    return match.group(1) if match else 'No options given.'


def _require(body: Dict[str, Any], name: str, type_: type) -> Any:
    if name not in body or not isinstance(body[name], type_):
        raise MalformedRequest(f'Field "{name}" missing or not a {type_.__name__}')
    return body[name]


def _max_tokens(body: Dict[str, Any], name: str) -> Optional[int]:
    value = body.get(name)
    if value is not None and (not isinstance(value, int) or value < 1):
        raise MalformedRequest(f'Field "{name}" must be a positive integer')
    return value


def _b64(data: str) -> bytes:
    try:
        return base64.b64decode(data, validate=True)
    except (binascii.Error, ValueError):
        raise MalformedRequest('Image is not valid base64')


def _chat_parts(body: Dict[str, Any]) -> Tuple[Optional[bytes], str]:
    messages = _require(body, 'messages', list)
    if not messages or not isinstance(messages[-1], dict):
        raise MalformedRequest('"messages" must hold at least one message object')

    content = messages[-1].get('content')
    if isinstance(content, str):
        return None, content
    if not isinstance(content, list):
        raise MalformedRequest('Message content must be a string or a list of parts')

    image, texts = None, []
    for part in content:
        if not isinstance(part, dict):
            raise MalformedRequest('Content part is not an object')
        if part.get('type') == 'text':
            texts.append(str(part.get('text', '')))
        elif part.get('type') == 'image_url':
            url = str((part.get('image_url') or {}).get('url', ''))
            if not url.startswith('data:') or ',' not in url:
                raise MalformedRequest('Only data URLs are accepted for images')
            image = _b64(url.split(',', 1)[1])
    return image, '\n'.join(texts)


def respond(route: str, body: Any, rules: Sequence[RigRule] = ()) -> Tuple[int, Dict[str, Any]]:
    """Status and JSON response for one POST; a pure function of its arguments"""
    try:
        if not isinstance(body, dict):
            raise MalformedRequest('Request body must be a JSON object')

        if route == CAPTION_ROUTE:
            _require(body, 'model', str)
            image = _b64(_require(body, 'image_b64', str))
            text, truncated = _limit_words(caption_text(image, _require(body, 'instruction', str), rules),
                                           _max_tokens(body, 'max_new_tokens'))
            return 200, {'text': text, 'truncated': truncated}

        if route == GENERATE_ROUTE:
            _require(body, 'model', str)
            text, truncated = _limit_words(generate_text(_require(body, 'prompt', str), rules),
                                           _max_tokens(body, 'max_new_tokens'))
            return 200, {'text': text, 'truncated': truncated}

        if route == CHAT_ROUTE:
            image, text_in = _chat_parts(body)
            if image is not None:
                text = caption_text(image, text_in, rules)
            else:
                text = generate_text(text_in, rules)
            text, truncated = _limit_words(text, _max_tokens(body, 'max_tokens'))
            return 200, {
                'id': 'mock-' + h8(json.dumps(body, sort_keys=True).encode('utf-8')),
                'object': 'chat.completion',
                'model': body.get('model'),
                'choices': [{
                    'index': 0,
                    'message': {'role': 'assistant', 'content': text},
                    'finish_reason': 'length' if truncated else 'stop'
                }]
            }
    except MalformedRequest as e:
        return 400, {'error': {'code': 'protocol_error', 'message': str(e)}}

    return 404, {'error': {'code': 'not_found', 'message': f'No route {route}'}}


def replay_log(log_path: str, rules: Sequence[RigRule] = ()) -> List[Tuple[int, Dict[str, Any]]]:
    """Recompute the responses of a JSONL request log"""
    responses = []
    with open(log_path, 'r', encoding='utf-8') as f:
        for line in f:
            if line.strip():
                entry = json.loads(line)
                responses.append(respond(entry['route'], entry['body'], rules))
    return responses


class MockState:
    """Counters, failure injection and request log shared by all handler threads"""

    def __init__(self, rules: Sequence[RigRule], delay: float, log_path: Optional[str]) -> None:
        self.rules = list(rules)
        self.delay = delay
        self.log_path = log_path

        self._lock = Lock()
        self.in_flight = 0
        self.high_water = 0
        self.counts: Counter = Counter()
        self.log: List[Dict[str, Any]] = []
        self._failures: Dict[str, Deque[int]] = {}

    def enter(self, route: str) -> Optional[int]:
        """Register a request; returns an injected failure status if one is queued"""
        with self._lock:
            self.in_flight += 1
            self.high_water = max(self.high_water, self.in_flight)
            self.counts[route] += 1
            queue = self._failures.get(route)
            return queue.popleft() if queue else None

    def leave(self) -> None:
        with self._lock:
            self.in_flight -= 1

    def record(self, route: str, body: Any) -> None:
        entry = {'route': route, 'body': body}
        with self._lock:
            self.log.append(entry)
            if self.log_path is not None:
                with open(self.log_path, 'a', encoding='utf-8') as f:
                    f.write(json.dumps(entry, ensure_ascii=False) + '\n')

    def fail_next(self, route: str, statuses: Iterable[int]) -> None:
        with self._lock:
            self._failures.setdefault(route, deque()).extend(statuses)

    def snapshot(self) -> Dict[str, Any]:
        with self._lock:
            return {
                'in_flight': self.in_flight,
                'high_water': self.high_water,
                'requests': sum(self.counts.values()),
                'routes': dict(self.counts)
            }

    def reset(self) -> None:
        with self._lock:
            self.high_water = self.in_flight
            self.counts.clear()
            self.log.clear()
            self._failures.clear()


class MockRequestHandler(BaseHTTPRequestHandler):
    protocol_version = 'HTTP/1.1'
    server_version = 'QvidMock/1'

    blog = logging.getLogger('qvidlog')

    @property
    def state(self) -> MockState:
        return self.server.state

    def log_message(self, format: str, *args: Any) -> None:
        self.blog.debug('mock: ' + format % args)

    def _send(self, status: int, obj: Any, headers: Optional[Dict[str, str]] = None) -> None:
        data = json.dumps(obj, ensure_ascii=False).encode('utf-8')
        self.send_response(status)
        self.send_header('Content-Type', 'application/json')
        self.send_header('Content-Length', str(len(data)))
        for name, value in (headers or {}).items():
            self.send_header(name, value)
        self.end_headers()
        self.wfile.write(data)

    def do_GET(self) -> None:
        if self.path == STATS_ROUTE:
            self._send(200, self.state.snapshot())
        elif self.path == LOG_ROUTE:
            self._send(200, {'log': list(self.state.log)})
        else:
            self._send(404, {'error': {'code': 'not_found', 'message': f'No route {self.path}'}})

    def do_POST(self) -> None:
        length = int(self.headers.get('Content-Length') or 0)
        raw = self.rfile.read(length)

        injected = self.state.enter(self.path)
        try:
            if self.state.delay:
                time.sleep(self.state.delay)

            if injected is not None:
                self._send(injected, {'error': {'code': 'injected', 'message': f'Injected {injected}'}},
                           {'Retry-After': '0'} if injected == 429 else None)
                return

            try:
                body = json.loads(raw.decode('utf-8'))
            except (UnicodeDecodeError, ValueError):
                self._send(400, {'error': {'code': 'protocol_error', 'message': 'Body is not JSON'}})
                return

            self.state.record(self.path, body)
            status, obj = respond(self.path, body, self.state.rules)
            self._send(status, obj)
        finally:
            self.state.leave()


class MockHTTPServer(ThreadingHTTPServer):
    daemon_threads = True
    request_queue_size = 128


class MockServer(Thread):
    """
    In-process mock of the model endpoints, serving in a background thread.

        with MockServer(rules=rig_answers(...)) as mock:
            client = ModelClient(EndpointConfig(mock.url, 'mock-reasoner'))
    """

    blog = logging.getLogger('qvidlog')

    def __init__(self, port: int = 0, rules: Sequence[RigRule] = (), delay: float = 0.0,
                 log_path: Optional[str] = None, host: str = '127.0.0.1') -> None:
        Thread.__init__(self, name='mock-server', daemon=True)

        self.state = MockState(rules, delay, log_path)
        self.httpd = MockHTTPServer((host, port), MockRequestHandler)
        self.httpd.state = self.state

        self.blog.info(f'Mock server bound to {self.url} ({len(self.state.rules)} rig rules)')

    @property
    def port(self) -> int:
        return self.httpd.server_address[1]

    @property
    def url(self) -> str:
        return f'http://{self.httpd.server_address[0]}:{self.port}'

    def run(self) -> None:
        self.httpd.serve_forever(poll_interval=0.1)

    def stop(self) -> None:
        self.httpd.shutdown()
        self.httpd.server_close()
        self.join()
        self.blog.info('Mock server stopped')

    def set_rules(self, rules: Sequence[RigRule]) -> None:
        self.state.rules = list(rules)

    def stats(self) -> Dict[str, Any]:
        return self.state.snapshot()

    def route_count(self, route: str) -> int:
        return self.state.snapshot()['routes'].get(route, 0)

    def fail_next(self, route: str, statuses: Iterable[int]) -> None:
        self.state.fail_next(route, statuses)

    def reset(self) -> None:
        self.state.reset()

    def __enter__(self) -> 'MockServer':
        self.start()
        return self

    def __exit__(self, *exc_info: Any) -> None:
        self.stop()


def serve(port: int = 0, rig_file: Optional[str] = None, delay: float = 0.0,
          log_path: Optional[str] = None, host: str = '127.0.0.1') -> MockServer:
    """Start the mock server and return its running handle"""
    rules = load_rig_file(rig_file) if rig_file else []
    server = MockServer(port, rules, delay, log_path, host)
    server.start()
    return server
