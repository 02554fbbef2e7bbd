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
import logging
import random
import time

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from threading import BoundedSemaphore, Lock, local
from typing import Any, Callable, Dict, List, Optional

import requests

from qvid.core_types import DecodeParams, QvidError


class ClientError(QvidError):
    pass


class Unavailable(ClientError):
    """Endpoint kept failing with a retryable error"""
    pass


class BadRequest(ClientError):
    """Endpoint rejected the request (4xx other than 429)"""
    pass


class ProtocolError(ClientError):
    """Response body is not what the wire protocol promises"""
    pass


class InvalidRequest(ClientError):
    pass


class WireProtocol(Enum):
    NATIVE = 'native'
    CHAT = 'chat'


CAPTION_DECODE_DEFAULT = DecodeParams(max_new_tokens=30, top_p=0.7)
REASON_DECODE_DEFAULT = DecodeParams(max_new_tokens=10)

RETRYABLE_STATUSES = frozenset({429, 500, 502, 503, 504})


@dataclass(frozen=True)
class EndpointConfig:
    base_url: str
    model_id: str
    timeout: float = 120.0
    max_retries: int = 3
    max_in_flight: int = 8
    auth_token: Optional[str] = field(default=None, repr=False)
    protocol: WireProtocol = WireProtocol.NATIVE
    backoff_base: float = 1.0
    backoff_cap: float = 30.0

    def __post_init__(self) -> None:
        if not self.base_url:
            raise InvalidRequest('Endpoint base_url must be set')
        if not self.model_id:
            raise InvalidRequest('Endpoint model_id must be set')
        if self.max_retries < 0:
            raise InvalidRequest(f'max_retries must be >= 0, got {self.max_retries}')
        if self.max_in_flight < 1:
            raise InvalidRequest(f'max_in_flight must be >= 1, got {self.max_in_flight}')


@dataclass(frozen=True)
class CaptionRequest:
    image_bytes: bytes
    instruction: str
    decode: DecodeParams = CAPTION_DECODE_DEFAULT


@dataclass(frozen=True)
class GenerateRequest:
    prompt: str
    decode: DecodeParams = REASON_DECODE_DEFAULT


@dataclass(frozen=True)
class GenerationResult:
    text: str
    truncated: bool = False


@dataclass(frozen=True)
class BatchSlot:
    """Outcome of one caption_batch element: exactly one of result/error is set"""
    result: Optional[GenerationResult] = None
    error: Optional[ClientError] = None

    @property
    def ok(self) -> bool:
        return self.error is None


class NativeAdapter:
    """JSON protocol of the reference serving stack: /v1/caption and /v1/generate"""

    caption_path = '/v1/caption'
    generate_path = '/v1/generate'

    @staticmethod
    def _decode_fields(model_id: str, decode: DecodeParams) -> Dict[str, Any]:
        return {
            'model': model_id,
            'max_new_tokens': decode.max_new_tokens,
            'top_p': decode.top_p,
            'seed': decode.seed
        }

    def caption_body(self, model_id: str, req: CaptionRequest) -> Dict[str, Any]:
        body = self._decode_fields(model_id, req.decode)
        body['image_b64'] = base64.b64encode(req.image_bytes).decode('ascii')
        body['instruction'] = req.instruction
        return body

    def generate_body(self, model_id: str, req: GenerateRequest) -> Dict[str, Any]:
        body = self._decode_fields(model_id, req.decode)
        body['prompt'] = req.prompt
        return body

    def parse(self, obj: Any) -> GenerationResult:
        if not isinstance(obj, dict) or not isinstance(obj.get('text'), str):
            raise ProtocolError(f'Response has no "text" string: {str(obj)[:200]}')
        return GenerationResult(obj['text'], bool(obj.get('truncated', False)))


class ChatAdapter:
    """OpenAI-style chat completions; the image goes as a data URL content part"""

    caption_path = '/v1/chat/completions'
    generate_path = '/v1/chat/completions'

    @staticmethod
    def _decode_fields(model_id: str, decode: DecodeParams) -> Dict[str, Any]:
        body: Dict[str, Any] = {'model': model_id, 'max_tokens': decode.max_new_tokens}
        if decode.greedy:
            body['temperature'] = 0
        else:
            body['top_p'] = decode.top_p
        if decode.seed is not None:
            body['seed'] = decode.seed
        return body

    def caption_body(self, model_id: str, req: CaptionRequest) -> Dict[str, Any]:
        body = self._decode_fields(model_id, req.decode)
        data_url = 'data:image/jpeg;base64,' + base64.b64encode(req.image_bytes).decode('ascii')
        body['messages'] = [{
            'role': 'user',
            'content': [
                {'type': 'image_url', 'image_url': {'url': data_url}},
                {'type': 'text', 'text': req.instruction}
            ]
        }]
        return body

    def generate_body(self, model_id: str, req: GenerateRequest) -> Dict[str, Any]:
        body = self._decode_fields(model_id, req.decode)
        body['messages'] = [{'role': 'user', 'content': req.prompt}]
        return body

    def parse(self, obj: Any) -> GenerationResult:
        try:
            choice = obj['choices'][0]
            text = choice['message']['content']
        except (KeyError, IndexError, TypeError):
            raise ProtocolError(f'Response has no choices[0].message.content: {str(obj)[:200]}')
        if not isinstance(text, str):
            raise ProtocolError('choices[0].message.content is not a string')
        return GenerationResult(text, choice.get('finish_reason') == 'length')


ADAPTERS = {
    WireProtocol.NATIVE: NativeAdapter,
    WireProtocol.CHAT: ChatAdapter
}


class ModelClient:
    """
    Client of one model endpoint (captioner or reasoner).

    Every POST holds one slot of a semaphore of cfg.max_in_flight, so the number of
    requests in flight never exceeds it no matter how many threads use the client.
    Connection errors, timeouts, 429 and 5xx are retried up to cfg.max_retries times
    with exponential backoff and jitter; Retry-After is honoured up to backoff_cap.
    """

    blog = logging.getLogger('qvidlog')

    def __init__(self, cfg: EndpointConfig, sleep: Callable[[float], None] = time.sleep,
                 rng: Optional[random.Random] = None) -> None:
        self.cfg = cfg
        self._adapter = ADAPTERS[cfg.protocol]()
        self._slots = BoundedSemaphore(cfg.max_in_flight)
        self._sessions = local()
        self._sleep = sleep
        self._rng = rng or random.Random()

        self._stats_lock = Lock()
        self.requests_sent = 0
        self.retries = 0

        self.blog.info(f'Creating {cfg.protocol.value} client for model {cfg.model_id} at {cfg.base_url}')

    @property
    def model_id(self) -> str:
        return self.cfg.model_id

    def _session(self) -> requests.Session:
        session = getattr(self._sessions, 'session', None)
        if session is None:
            session = requests.Session()
            if self.cfg.auth_token:
                session.headers['Authorization'] = f'Bearer {self.cfg.auth_token}'
            self._sessions.session = session
        return session

    def _backoff(self, attempt: int, retry_after: Optional[str] = None) -> float:
        if retry_after is not None:
            try:
                return min(self.cfg.backoff_cap, max(0.0, float(retry_after)))
            except ValueError:
                pass
        ceiling = min(self.cfg.backoff_cap, self.cfg.backoff_base * 2 ** attempt)
        return ceiling / 2 + self._rng.uniform(0, ceiling / 2)

    def _count(self, retry: bool = False) -> None:
        with self._stats_lock:
            if retry:
                self.retries += 1
            else:
                self.requests_sent += 1

    def _post(self, route: str, body: Dict[str, Any]) -> GenerationResult:
        url = self.cfg.base_url.rstrip('/') + route
        last_problem = ''

        for attempt in range(self.cfg.max_retries + 1):
            if attempt > 0:
                self._count(retry=True)

            retry_after = None
            with self._slots:
                self._count()
                try:
                    resp = self._session().post(url, json=body, timeout=self.cfg.timeout)
                except (requests.ConnectionError, requests.Timeout,
                        requests.exceptions.ChunkedEncodingError) as e:
                    resp = None
                    last_problem = f'{type(e).__name__}: {e}'
                except requests.RequestException as e:
                    msg = f"Can't send a request to {url}: {type(e).__name__}: {e}"
                    self.blog.error(msg)
                    raise InvalidRequest(msg)

            if resp is not None:
                if resp.status_code == 200:
                    try:
                        obj = resp.json()
                    except ValueError:
                        raise ProtocolError(f'{url} returned a body that is not JSON: {resp.text[:200]!r}')
                    return self._adapter.parse(obj)

                if resp.status_code not in RETRYABLE_STATUSES:
                    msg = f'{url} rejected the request with {resp.status_code}: {resp.text[:200]}'
                    self.blog.error(msg)
                    raise BadRequest(msg)

                last_problem = f'HTTP {resp.status_code}'
                retry_after = resp.headers.get('Retry-After')

            if attempt < self.cfg.max_retries:
                delay = self._backoff(attempt, retry_after)
                self.blog.warning(f'{url} failed ({last_problem}), retry {attempt + 1}/{self.cfg.max_retries} '
                                  f'in {delay:.2f}s')
                self._sleep(delay)

        msg = f'{url} unavailable after {self.cfg.max_retries + 1} attempts: {last_problem}'
        self.blog.error(msg)
        raise Unavailable(msg)

    def caption(self, req: CaptionRequest) -> GenerationResult:
        """Caption one image under one instruction"""
        if not req.image_bytes:
            raise InvalidRequest('Caption request without image data')
        return self._post(self._adapter.caption_path, self._adapter.caption_body(self.cfg.model_id, req))

    def generate(self, req: GenerateRequest) -> GenerationResult:
        """Text generation for one prompt"""
        if not req.prompt:
            raise InvalidRequest('Generate request with an empty prompt')
        return self._post(self._adapter.generate_path, self._adapter.generate_body(self.cfg.model_id, req))

    def caption_batch(self, reqs: List[CaptionRequest]) -> List[BatchSlot]:
        """
        Caption many images concurrently. Output i corresponds to input i.

        A failed element does not abort the others; its slot carries the error.
        """

        if not reqs:
            return []

        def one(req: CaptionRequest) -> BatchSlot:
            try:
                return BatchSlot(result=self.caption(req))
            except ClientError as e:
                return BatchSlot(error=e)

        workers = min(len(reqs), self.cfg.max_in_flight)
        with ThreadPoolExecutor(max_workers=workers, thread_name_prefix='caption') as pool:
            return list(pool.map(one, reqs))

    def stats(self) -> Dict[str, int]:
        with self._stats_lock:
            return {'requests_sent': self.requests_sent, 'retries': self.retries}
