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

import datetime
import json
import logging
import os
import tempfile

from dataclasses import asdict, dataclass
from os import path
from threading import Lock
from typing import Any, Dict, Optional

from qvid.core_types import QvidError, sha256_hex

PIPELINE_VERSION = '1'


class StorageError(QvidError):
    pass


@dataclass(frozen=True)
class CacheKey:
    digest: str


@dataclass(frozen=True)
class CacheEntry:
    key: CacheKey
    caption_text: str
    truncated: bool
    created_at: str
    pipeline_version: str = PIPELINE_VERSION

    def to_json_dict(self) -> Dict[str, Any]:
        obj = asdict(self)
        obj['key'] = self.key.digest
        return obj

    @classmethod
    def from_json_dict(cls, obj: Dict[str, Any]) -> 'CacheEntry':
        return cls(
            key=CacheKey(obj['key']),
            caption_text=obj['caption_text'],
            truncated=bool(obj['truncated']),
            created_at=obj['created_at'],
            pipeline_version=obj.get('pipeline_version', PIPELINE_VERSION)
        )


def _field(value: Any) -> str:
    if value is None:
        return '-1:'
    text = str(value)
    return f'{len(text.encode("utf-8"))}:{text}'


def make_key(captioner_model_id: str, video_id: str, source_index: int, instruction: str,
             max_new_tokens: int, top_p: Optional[float], seed: Optional[int], image_digest: str) -> CacheKey:
    """
    Digest over the length-prefixed concatenation of the fields in this order.
    Absent values are encoded as '-1:' so they never collide with any present value.
    """

    fields = (captioner_model_id, video_id, source_index, instruction,
              max_new_tokens, top_p, seed, image_digest)
    canonical = ''.join(_field(f) for f in fields)
    return CacheKey(sha256_hex(canonical.encode('utf-8')))


def now_iso() -> str:
    return datetime.datetime.now(datetime.timezone.utc).isoformat(timespec='seconds')


class CaptionCache:
    """
    Content-addressed caption store: one JSON file per entry under root/ab/cd/<digest>.json.

    Writes go to a temporary file in the target directory and are renamed into place,
    so readers in any thread or process see either no entry or a whole one.
    """

    blog = logging.getLogger('qvidlog')

    def __init__(self, root: str) -> None:
        self.root = root
        self._stats_lock = Lock()
        self.hits = 0
        self.misses = 0

        try:
            os.makedirs(root, exist_ok=True)
        except OSError as e:
            raise StorageError(f"Can't create cache directory {root}: {e}")

        self.blog.info(f'Using caption cache at {root}')

    def entry_path(self, key: CacheKey) -> str:
        d = key.digest
        return path.join(self.root, d[:2], d[2:4], d + '.json')

    def _tally(self, hit: bool) -> None:
        with self._stats_lock:
            if hit:
                self.hits += 1
            else:
                self.misses += 1

    def get(self, key: CacheKey) -> Optional[CacheEntry]:
        """Stored entry or None on a miss"""
        file_path = self.entry_path(key)
        try:
            with open(file_path, 'r', encoding='utf-8') as f:
                entry = CacheEntry.from_json_dict(json.load(f))
        except FileNotFoundError:
            self._tally(hit=False)
            return None
        except (ValueError, KeyError, OSError) as e:
            self.blog.warning(f'Ignoring unreadable cache entry {file_path}: {e}')
            self._tally(hit=False)
            return None

        if entry.key != key:
            self.blog.warning(f'Cache entry {file_path} is stored under a different key, ignoring it')
            self._tally(hit=False)
            return None

        self._tally(hit=True)
        return entry

    def put(self, key: CacheKey, entry: CacheEntry) -> None:
        if entry.key != key:
            raise ValueError(f'Entry key {entry.key.digest} does not match {key.digest}')

        file_path = self.entry_path(key)
        tmp_path = None
        try:
            os.makedirs(path.dirname(file_path), exist_ok=True)
            fd, tmp_path = tempfile.mkstemp(prefix='.tmp-', dir=path.dirname(file_path))
            with os.fdopen(fd, 'w', encoding='utf-8') as f:
                json.dump(entry.to_json_dict(), f, ensure_ascii=False)
                f.flush()
                os.fsync(f.fileno())
            os.replace(tmp_path, file_path)
        except OSError as e:
            if tmp_path is not None and path.exists(tmp_path):
                os.unlink(tmp_path)
            msg = f"Can't write cache entry {file_path}: {e}"
            self.blog.error(msg)
            raise StorageError(msg)

        self.blog.debug(f'Cached caption {key.digest[:12]}')

    def stats(self) -> Dict[str, int]:
        with self._stats_lock:
            return {'hits': self.hits, 'misses': self.misses}
